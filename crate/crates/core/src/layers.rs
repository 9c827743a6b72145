//! White-box layers. Each layer exposes its forward output, its backward
//! products and its parameters so that the engine can probe all of them.
//!
//! The optimizer update happens inside [`LayerState::backward`], so the
//! weights a probe sees after backward are the post-update weights of the
//! same batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{OptimizerKind, Slot};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    Linear,
}

impl Activation {
    pub const ALL: [Activation; 5] = [
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Softmax,
        Activation::Linear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Softmax => "softmax",
            Activation::Linear => "linear",
        }
    }

    pub fn parse(name: &str) -> Option<Activation> {
        Activation::ALL.into_iter().find(|a| a.name() == name)
    }

    fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => x.map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 }),
            Activation::Sigmoid => x.map(sigmoid),
            Activation::Tanh => x.map(f64::tanh),
            Activation::Linear => x.clone(),
            Activation::Softmax => softmax_last_axis(x),
        }
    }

    /// `dy ⊙ f'(x)`, or the full Jacobian-vector product for softmax.
    fn backward(self, pre: &Tensor, out: &Tensor, dy: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Relu => pre.zip_map(dy, "relu backward", |x, g| {
                if x > 0.0 {
                    g
                } else if x.is_nan() {
                    f64::NAN
                } else {
                    0.0
                }
            }),
            Activation::Sigmoid => out.zip_map(dy, "sigmoid backward", |s, g| g * s * (1.0 - s)),
            Activation::Tanh => out.zip_map(dy, "tanh backward", |t, g| g * (1.0 - t * t)),
            Activation::Linear => {
                out.expect_same_shape(dy, "linear backward")?;
                Ok(dy.clone())
            }
            Activation::Softmax => {
                out.expect_same_shape(dy, "softmax backward")?;
                let width = *out.shape().last().expect("rank >= 1");
                let mut dx = dy.clone();
                for (row, (y, g)) in dx
                    .data_mut()
                    .chunks_mut(width)
                    .zip(out.data().chunks(width).zip(dy.data().chunks(width)))
                {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for ((d, &yi), &gi) in row.iter_mut().zip(y).zip(g) {
                        *d = yi * (gi - dot);
                    }
                }
                Ok(dx)
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_last_axis(x: &Tensor) -> Tensor {
    let width = *x.shape().last().expect("rank >= 1");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Dense {
        units: usize,
        input_dim: usize,
    },
    Activation(Activation),
    Dropout {
        rate: f64,
    },
    Conv2D {
        filters: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: Padding,
    },
    MaxPool2D {
        pool_h: usize,
        pool_w: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerKind {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2D { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "Dense",
            LayerKind::Activation(_) => "Activation",
            LayerKind::Dropout { .. } => "Dropout",
            LayerKind::Conv2D { .. } => "Conv2D",
            LayerKind::MaxPool2D { .. } => "MaxPooling2D",
            LayerKind::Flatten => "Flatten",
        }
    }
}

/// Values saved by forward for use in backward.
#[derive(Clone, Debug, Default)]
enum Cache {
    #[default]
    Empty,
    Input(Tensor),
    Activation {
        pre: Tensor,
        out: Tensor,
    },
    DropoutMask(Option<Tensor>),
    PoolArgmax {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Flatten(Vec<usize>),
}

/// Products of one backward call.
#[derive(Clone, Debug)]
pub struct BackwardProducts {
    /// Gradient with respect to the layer input, propagated upstream.
    pub dx: Tensor,
    /// Kernel and bias after the optimizer update; `None` for parameterless layers.
    pub updated: Option<(Tensor, Tensor)>,
    /// Raw kernel and bias gradients; `None` for parameterless layers.
    pub delta: Option<(Tensor, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct LayerState {
    pub kind: LayerKind,
    pub kernel: Tensor,
    pub bias: Tensor,
    kernel_slot: Slot,
    bias_slot: Slot,
    cache: Cache,
    /// 1-based index of the parameterized layer this layer reports under.
    pub user_index: usize,
}

impl LayerState {
    /// A parameterless layer.
    pub fn new(kind: LayerKind, user_index: usize) -> Result<Self> {
        if let LayerKind::Dropout { rate } = kind {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
            }
        }
        if kind.is_parameterized() {
            return Err(Error::Config(format!(
                "{} needs parameters; use LayerState::with_params",
                kind.name()
            )));
        }
        Ok(Self {
            kind,
            kernel: Tensor::empty(),
            bias: Tensor::empty(),
            kernel_slot: Slot::Empty,
            bias_slot: Slot::Empty,
            cache: Cache::Empty,
            user_index,
        })
    }

    /// A Dense or Conv2D layer with explicit kernel and bias.
    pub fn with_params(kind: LayerKind, kernel: Tensor, bias: Tensor, user_index: usize) -> Result<Self> {
        let (kshape, bshape) = match kind {
            LayerKind::Dense { units, input_dim } => (vec![input_dim, units], vec![units]),
            LayerKind::Conv2D {
                filters,
                kernel_h,
                kernel_w,
                ..
            } => {
                let in_ch = kernel.shape().get(2).copied().unwrap_or(0);
                (vec![kernel_h, kernel_w, in_ch, filters], vec![filters])
            }
            _ => {
                return Err(Error::Config(format!("{} has no parameters", kind.name())));
            }
        };
        if kernel.shape() != kshape.as_slice() || bias.shape() != bshape.as_slice() {
            return Err(Error::shape(
                format!("layer {user_index} parameters"),
                format!(
                    "kernel {:?}/bias {:?}, expected {kshape:?}/{bshape:?}",
                    kernel.shape(),
                    bias.shape()
                ),
            ));
        }
        Ok(Self {
            kind,
            kernel,
            bias,
            kernel_slot: Slot::Empty,
            bias_slot: Slot::Empty,
            cache: Cache::Empty,
            user_index,
        })
    }

    pub fn is_parameterized(&self) -> bool {
        self.kind.is_parameterized()
    }

    /// Kernel then bias, flattened into one vector.
    pub fn params_flat(&self) -> Tensor {
        Tensor::concat_flat(&[&self.kernel, &self.bias])
    }

    fn shape_error(&self, detail: String) -> Error {
        Error::shape(format!("{} (layer {})", self.kind.name(), self.user_index), detail)
    }

    pub fn forward(&mut self, x: &Tensor, training: bool, rng: &mut Rng) -> Result<Tensor> {
        let (out, cache) = match self.kind {
            LayerKind::Dense { input_dim, .. } => {
                if x.rank() != 2 || x.shape()[1] != input_dim {
                    return Err(self.shape_error(format!(
                        "input {:?}, expected [batch, {input_dim}]",
                        x.shape()
                    )));
                }
                let z = x.matmul(&self.kernel)?;
                let b = self.bias.data();
                let mut z = z;
                for row in z.data_mut().chunks_mut(b.len()) {
                    for (v, bv) in row.iter_mut().zip(b) {
                        *v += bv;
                    }
                }
                (z, Cache::Input(x.clone()))
            }
            LayerKind::Activation(act) => {
                let out = act.apply(x);
                (
                    out.clone(),
                    Cache::Activation {
                        pre: x.clone(),
                        out,
                    },
                )
            }
            LayerKind::Dropout { rate } => {
                if !training || rate == 0.0 {
                    (x.clone(), Cache::DropoutMask(None))
                } else {
                    let keep = 1.0 - rate;
                    let mut mask = Tensor::zeros(x.shape());
                    for m in mask.data_mut() {
                        if rng.bernoulli(keep) {
                            *m = 1.0 / keep;
                        }
                    }
                    (x.mul(&mask)?, Cache::DropoutMask(Some(mask)))
                }
            }
            LayerKind::Conv2D { .. } => {
                let out = self.conv_forward(x)?;
                (out, Cache::Input(x.clone()))
            }
            LayerKind::MaxPool2D { pool_h, pool_w, stride } => {
                let (out, argmax) = self.pool_forward(x, pool_h, pool_w, stride)?;
                (
                    out,
                    Cache::PoolArgmax {
                        input_shape: x.shape().to_vec(),
                        argmax,
                    },
                )
            }
            LayerKind::Flatten => {
                if x.rank() < 2 {
                    return Err(self.shape_error(format!("cannot flatten {:?}", x.shape())));
                }
                (
                    x.reshape(&[x.rows(), x.row_len()])?,
                    Cache::Flatten(x.shape().to_vec()),
                )
            }
        };
        self.cache = cache;
        Ok(out)
    }

    /// Backpropagates `dy`, applies the optimizer to any parameters, and
    /// clears the forward cache.
    pub fn backward(&mut self, dy: &Tensor, optimizer: &OptimizerKind) -> Result<BackwardProducts> {
        let cache = std::mem::take(&mut self.cache);
        if matches!(cache, Cache::Empty) {
            return Err(Error::Protocol(format!(
                "backward called before forward on {} (layer {})",
                self.kind.name(),
                self.user_index
            )));
        }
        let no_params = |dx| BackwardProducts {
            dx,
            updated: None,
            delta: None,
        };
        match (&self.kind, cache) {
            (LayerKind::Dense { .. }, Cache::Input(x)) => {
                let expected = [x.rows(), self.bias.len()];
                if dy.shape() != expected {
                    return Err(self.shape_error(format!("dy {:?}, expected {expected:?}", dy.shape())));
                }
                let dw = x.transpose()?.matmul(dy)?;
                let db = dy.sum_rows();
                let dx = dy.matmul(&self.kernel.transpose()?)?;
                self.apply_update(optimizer, dw, db, dx)
            }
            (LayerKind::Conv2D { .. }, Cache::Input(x)) => {
                let (dw, db, dx) = self.conv_backward(&x, dy)?;
                self.apply_update(optimizer, dw, db, dx)
            }
            (LayerKind::Activation(act), Cache::Activation { pre, out }) => {
                if dy.shape() != out.shape() {
                    return Err(self.shape_error(format!("dy {:?}, expected {:?}", dy.shape(), out.shape())));
                }
                Ok(no_params(act.backward(&pre, &out, dy)?))
            }
            (LayerKind::Dropout { .. }, Cache::DropoutMask(mask)) => match mask {
                None => Ok(no_params(dy.clone())),
                Some(mask) => {
                    let dx = dy
                        .mul(&mask)
                        .map_err(|_| self.shape_error(format!("dy {:?}, expected {:?}", dy.shape(), mask.shape())))?;
                    Ok(no_params(dx))
                }
            },
            (LayerKind::MaxPool2D { .. }, Cache::PoolArgmax { input_shape, argmax }) => {
                if dy.len() != argmax.len() {
                    return Err(self.shape_error(format!("dy {:?} does not match pooled output", dy.shape())));
                }
                let mut dx = Tensor::zeros(&input_shape);
                for (&src, &g) in argmax.iter().zip(dy.data()) {
                    dx.data_mut()[src] += g;
                }
                Ok(no_params(dx))
            }
            (LayerKind::Flatten, Cache::Flatten(shape)) => {
                let dx = dy
                    .reshape(&shape)
                    .map_err(|_| self.shape_error(format!("dy {:?} cannot unflatten to {shape:?}", dy.shape())))?;
                Ok(no_params(dx))
            }
            _ => unreachable!("cache variant always matches layer kind"),
        }
    }

    fn apply_update(
        &mut self,
        optimizer: &OptimizerKind,
        dw: Tensor,
        db: Tensor,
        dx: Tensor,
    ) -> Result<BackwardProducts> {
        self.kernel = optimizer.step(&mut self.kernel_slot, &self.kernel, &dw)?;
        self.bias = optimizer.step(&mut self.bias_slot, &self.bias, &db)?;
        Ok(BackwardProducts {
            dx,
            updated: Some((self.kernel.clone(), self.bias.clone())),
            delta: Some((dw, db)),
        })
    }

    fn conv_geometry(&self, x: &Tensor) -> Result<ConvGeometry> {
        let LayerKind::Conv2D {
            filters,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } = self.kind
        else {
            unreachable!()
        };
        let in_ch = self.kernel.shape()[2];
        if x.rank() != 4 || x.shape()[3] != in_ch {
            return Err(self.shape_error(format!(
                "input {:?}, expected NHWC with {in_ch} channels",
                x.shape()
            )));
        }
        let (n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (out_h, pad_top) = conv_output_dim(h, kernel_h, stride, padding)
            .ok_or_else(|| self.shape_error(format!("kernel {kernel_h} taller than input {h}")))?;
        let (out_w, pad_left) = conv_output_dim(w, kernel_w, stride, padding)
            .ok_or_else(|| self.shape_error(format!("kernel {kernel_w} wider than input {w}")))?;
        Ok(ConvGeometry {
            n,
            h,
            w,
            in_ch,
            filters,
            kernel_h,
            kernel_w,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    fn conv_forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.conv_geometry(x)?;
        let mut out = Tensor::zeros(&[g.n, g.out_h, g.out_w, g.filters]);
        let xd = x.data();
        let kd = self.kernel.data();
        let od = out.data_mut();
        for b in 0..g.n {
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let o_base = ((b * g.out_h + oh) * g.out_w + ow) * g.filters;
                    od[o_base..o_base + g.filters].copy_from_slice(self.bias.data());
                    g.for_each_tap(b, oh, ow, |x_idx, k_base| {
                        let xv = xd[x_idx];
                        for f in 0..g.filters {
                            od[o_base + f] += xv * kd[k_base + f];
                        }
                    });
                }
            }
        }
        Ok(out)
    }

    fn conv_backward(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let g = self.conv_geometry(x)?;
        let expected = [g.n, g.out_h, g.out_w, g.filters];
        if dy.shape() != expected {
            return Err(self.shape_error(format!("dy {:?}, expected {expected:?}", dy.shape())));
        }
        let mut dw = Tensor::zeros(self.kernel.shape());
        let mut dx = Tensor::zeros(x.shape());
        let xd = x.data();
        let kd = self.kernel.data();
        let dyd = dy.data();
        for b in 0..g.n {
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let o_base = ((b * g.out_h + oh) * g.out_w + ow) * g.filters;
                    let grad = &dyd[o_base..o_base + g.filters];
                    g.for_each_tap(b, oh, ow, |x_idx, k_base| {
                        let xv = xd[x_idx];
                        let mut acc = 0.0;
                        for f in 0..g.filters {
                            dw.data_mut()[k_base + f] += xv * grad[f];
                            acc += kd[k_base + f] * grad[f];
                        }
                        dx.data_mut()[x_idx] += acc;
                    });
                }
            }
        }
        let db = dy.reshape(&[g.n * g.out_h * g.out_w, g.filters])?.sum_rows();
        Ok((dw, db, dx))
    }

    fn pool_forward(&self, x: &Tensor, pool_h: usize, pool_w: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
        if x.rank() != 4 {
            return Err(self.shape_error(format!("input {:?}, expected NHWC", x.shape())));
        }
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if pool_h > h || pool_w > w {
            return Err(self.shape_error(format!("pool {pool_h}x{pool_w} larger than input {h}x{w}")));
        }
        let out_h = (h - pool_h) / stride + 1;
        let out_w = (w - pool_w) / stride + 1;
        let mut out = Tensor::zeros(&[n, out_h, out_w, c]);
        let mut argmax = Vec::with_capacity(out.len());
        let xd = x.data();
        for b in 0..n {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    for ch in 0..c {
                        let mut best_idx = usize::MAX;
                        let mut best = f64::NEG_INFINITY;
                        for i in 0..pool_h {
                            for j in 0..pool_w {
                                let idx = ((b * h + oh * stride + i) * w + ow * stride + j) * c + ch;
                                let v = xd[idx];
                                if best_idx == usize::MAX || v > best || (v.is_nan() && !best.is_nan()) {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        out.data_mut()[argmax.len()] = best;
                        argmax.push(best_idx);
                    }
                }
            }
        }
        Ok((out, argmax))
    }

    /// Shape of the output produced for an input of `input` shape (batch
    /// dimension included), without running the layer.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| self.shape_error(msg);
        match self.kind {
            LayerKind::Dense { units, input_dim } => {
                if input.len() != 2 || input[1] != input_dim {
                    return Err(bad(format!("input {input:?}, expected [batch, {input_dim}]")));
                }
                Ok(vec![input[0], units])
            }
            LayerKind::Activation(_) | LayerKind::Dropout { .. } => Ok(input.to_vec()),
            LayerKind::Flatten => {
                if input.len() < 2 {
                    return Err(bad(format!("cannot flatten {input:?}")));
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
            LayerKind::Conv2D {
                filters,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                let in_ch = self.kernel.shape()[2];
                if input.len() != 4 || input[3] != in_ch {
                    return Err(bad(format!("input {input:?}, expected NHWC with {in_ch} channels")));
                }
                let (oh, _) = conv_output_dim(input[1], kernel_h, stride, padding)
                    .ok_or_else(|| bad(format!("kernel taller than input {input:?}")))?;
                let (ow, _) = conv_output_dim(input[2], kernel_w, stride, padding)
                    .ok_or_else(|| bad(format!("kernel wider than input {input:?}")))?;
                Ok(vec![input[0], oh, ow, filters])
            }
            LayerKind::MaxPool2D { pool_h, pool_w, stride } => {
                if input.len() != 4 || pool_h > input[1] || pool_w > input[2] {
                    return Err(bad(format!("pool {pool_h}x{pool_w} does not fit input {input:?}")));
                }
                Ok(vec![
                    input[0],
                    (input[1] - pool_h) / stride + 1,
                    (input[2] - pool_w) / stride + 1,
                    input[3],
                ])
            }
        }
    }
}

/// Output length and leading pad along one spatial axis.
fn conv_output_dim(size: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => (kernel <= size).then(|| ((size - kernel) / stride + 1, 0)),
        Padding::Same => {
            let out = size.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(size);
            Some((out, total / 2))
        }
    }
}

struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    in_ch: usize,
    filters: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    /// Visits every (input element, kernel row offset) pair contributing to
    /// output position (b, oh, ow). Zero padding contributes nothing, so
    /// out-of-bounds taps are skipped.
    fn for_each_tap(&self, b: usize, oh: usize, ow: usize, mut visit: impl FnMut(usize, usize)) {
        for i in 0..self.kernel_h {
            let ih = (oh * self.stride + i) as isize - self.pad_top as isize;
            if ih < 0 || ih >= self.h as isize {
                continue;
            }
            for j in 0..self.kernel_w {
                let iw = (ow * self.stride + j) as isize - self.pad_left as isize;
                if iw < 0 || iw >= self.w as isize {
                    continue;
                }
                let x_base = ((b * self.h + ih as usize) * self.w + iw as usize) * self.in_ch;
                for c in 0..self.in_ch {
                    let k_base = ((i * self.kernel_w + j) * self.in_ch + c) * self.filters;
                    visit(x_base + c, k_base);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn dense(kernel: Tensor, bias: Vec<f64>) -> LayerState {
        let (input_dim, units) = (kernel.shape()[0], kernel.shape()[1]);
        LayerState::with_params(LayerKind::Dense { units, input_dim }, kernel, Tensor::vector(bias), 1).unwrap()
    }

    fn act(a: Activation) -> LayerState {
        LayerState::new(LayerKind::Activation(a), 1).unwrap()
    }

    #[test]
    fn dense_identity_forward() {
        let mut layer = dense(m(&[vec![1.0, 0.0], vec![0.0, 1.0]]), vec![0.0, 0.0]);
        let out = layer.forward(&m(&[vec![3.0, 4.0]]), true, &mut Rng::new(0)).unwrap();
        assert_eq!(out, m(&[vec![3.0, 4.0]]));
    }

    #[test]
    fn activation_forward_examples() {
        let mut rng = Rng::new(0);
        let out = act(Activation::Relu).forward(&m(&[vec![-1.0, 2.0]]), true, &mut rng).unwrap();
        assert_eq!(out, m(&[vec![0.0, 2.0]]));
        let out = act(Activation::Softmax).forward(&m(&[vec![0.0, 0.0]]), true, &mut rng).unwrap();
        assert_eq!(out, m(&[vec![0.5, 0.5]]));
    }

    #[test]
    fn softmax_handles_large_logits() {
        let out = act(Activation::Softmax)
            .forward(&m(&[vec![1000.0, 0.0, -1000.0]]), true, &mut Rng::new(0))
            .unwrap();
        assert!(!out.has_non_finite());
        assert!((out.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv_all_ones_kernel() {
        let kind = LayerKind::Conv2D {
            filters: 1,
            kernel_h: 2,
            kernel_w: 2,
            stride: 1,
            padding: Padding::Valid,
        };
        let mut layer =
            LayerState::with_params(kind, Tensor::filled(&[2, 2, 1, 1], 1.0), Tensor::zeros(&[1]), 1).unwrap();
        let x = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = layer.forward(&x, true, &mut Rng::new(0)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn conv_same_padding_keeps_spatial_size() {
        let kind = LayerKind::Conv2D {
            filters: 2,
            kernel_h: 3,
            kernel_w: 2,
            stride: 1,
            padding: Padding::Same,
        };
        let layer = LayerState::with_params(kind, Tensor::zeros(&[3, 2, 1, 2]), Tensor::zeros(&[2]), 1).unwrap();
        assert_eq!(layer.output_shape(&[1, 5, 4, 1]).unwrap(), vec![1, 5, 4, 2]);
        assert_eq!(conv_output_dim(5, 2, 2, Padding::Same), Some((3, 0)));
        assert_eq!(conv_output_dim(4, 3, 1, Padding::Same), Some((4, 1)));
    }

    #[test]
    fn maxpool_forward_and_backward() {
        let mut layer = LayerState::new(
            LayerKind::MaxPool2D {
                pool_h: 2,
                pool_w: 2,
                stride: 2,
            },
            1,
        )
        .unwrap();
        let x = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = layer.forward(&x, true, &mut Rng::new(0)).unwrap();
        assert_eq!(out.data(), &[4.0]);
        let back = layer
            .backward(&Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap(), &OptimizerKind::sgd(0.1))
            .unwrap();
        assert_eq!(back.dx.data(), &[0.0, 0.0, 0.0, 5.0]);
        assert!(back.updated.is_none());
    }

    #[test]
    fn dense_backward_example() {
        let mut layer = dense(m(&[vec![2.0]]), vec![0.0]);
        layer.forward(&m(&[vec![3.0]]), true, &mut Rng::new(0)).unwrap();
        let out = layer.backward(&m(&[vec![1.0]]), &OptimizerKind::sgd(0.0)).unwrap();
        assert_eq!(out.dx, m(&[vec![2.0]]));
        let (w, _) = out.updated.unwrap();
        assert_eq!(w, m(&[vec![2.0]]));
        let (dw, db) = out.delta.unwrap();
        assert_eq!(dw, m(&[vec![3.0]]));
        assert_eq!(db.data(), &[1.0]);
    }

    #[test]
    fn relu_backward_gates() {
        let mut layer = act(Activation::Relu);
        layer.forward(&m(&[vec![-1.0, 2.0]]), true, &mut Rng::new(0)).unwrap();
        let out = layer.backward(&m(&[vec![5.0, 5.0]]), &OptimizerKind::sgd(0.1)).unwrap();
        assert_eq!(out.dx, m(&[vec![0.0, 5.0]]));
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut layer = LayerState::new(LayerKind::Dropout { rate: 0.0 }, 1).unwrap();
        layer.forward(&m(&[vec![7.0]]), true, &mut Rng::new(0)).unwrap();
        let out = layer.backward(&m(&[vec![7.0]]), &OptimizerKind::sgd(0.1)).unwrap();
        assert_eq!(out.dx, m(&[vec![7.0]]));
    }

    #[test]
    fn dropout_inference_is_bit_identical() {
        let mut layer = LayerState::new(LayerKind::Dropout { rate: 0.7 }, 1).unwrap();
        let x = m(&[vec![0.1, -3.3, f64::NAN]]);
        let out = layer.forward(&x, false, &mut Rng::new(0)).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn dropout_rate_must_be_below_one() {
        assert!(LayerState::new(LayerKind::Dropout { rate: 1.0 }, 1).is_err());
        assert!(LayerState::new(LayerKind::Dropout { rate: -0.1 }, 1).is_err());
    }

    #[test]
    fn backward_before_forward_is_protocol_error() {
        let mut layer = dense(m(&[vec![1.0]]), vec![0.0]);
        let err = layer.backward(&m(&[vec![1.0]]), &OptimizerKind::sgd(0.1));
        assert!(matches!(err, Err(Error::Protocol(_))));
    }

    #[test]
    fn forward_shape_error_names_layer() {
        let mut layer = dense(m(&[vec![1.0], vec![1.0]]), vec![0.0]);
        layer.user_index = 3;
        let err = layer.forward(&m(&[vec![1.0, 2.0, 3.0]]), true, &mut Rng::new(0)).unwrap_err();
        assert!(err.to_string().contains("layer 3"), "{err}");
    }

    #[test]
    fn backward_shape_mismatch() {
        let mut layer = dense(m(&[vec![1.0]]), vec![0.0]);
        layer.forward(&m(&[vec![1.0]]), true, &mut Rng::new(0)).unwrap();
        let err = layer.backward(&m(&[vec![1.0, 1.0]]), &OptimizerKind::sgd(0.1));
        assert!(matches!(err, Err(Error::Shape { .. })));
    }
}
