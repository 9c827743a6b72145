//! Oracles shared by the integration tests and the acceptance target.
//!
//! Everything here is written against the public API only and recomputes
//! expected values independently (finite differences, closed-form rescans).

#![allow(dead_code)]

use std::collections::BTreeSet;

use dnnloc::detector::{DeltaSource, Detector, DetectorConfig, VerdictCode};
use dnnloc::engine::Model;
use dnnloc::layers::{Activation, LayerKind, LayerState, Padding};
use dnnloc::objectives::{self, LossKind, OptimizerKind};
use dnnloc::probes::{BatchSnapshot, SnapshotBuilder};
use dnnloc::rng::Rng;
use dnnloc::tensor::Tensor;
use dnnloc::workbench::ModelSpec;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor for relative error, so entries that are zero up to
/// rounding compare on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
}

/// Random values with magnitude at least `gap`, keeping clear of kinks at 0.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut Rng) -> Tensor {
    random_tensor(shape, rng).map(|v| v.signum() * (gap + v.abs()))
}

fn weighted_sum(a: &Tensor, w: &Tensor) -> f64 {
    a.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
}

/// Outcome of one gradient-check instance.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub label: String,
    pub max_rel_err: f64,
    pub compared: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.compared > 0 && self.max_rel_err <= GRAD_TOL
    }
}

/// Layer-level check: f(x, params) = sum(forward(x) * r) for a fixed random
/// `r`, differentiated through `backward(r)` versus central differences.
pub fn check_layer(label: &str, template: &LayerState, input: &Tensor, seed: u64) -> GradCheck {
    let dropout_seed = seed ^ 0xD0;
    let eval = |layer: &LayerState, x: &Tensor, r: &Tensor| -> f64 {
        let mut l = layer.clone();
        let out = l.forward(x, true, &mut Rng::new(dropout_seed)).unwrap();
        weighted_sum(&out, r)
    };
    let mut probe = template.clone();
    let out = probe.forward(input, true, &mut Rng::new(dropout_seed)).unwrap();
    let r = random_tensor(out.shape(), &mut Rng::new(seed ^ 0xA5));
    let products = probe.backward(&r, &OptimizerKind::sgd(0.0)).unwrap();

    let mut max_err: f64 = 0.0;
    let mut compared = 0;
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = input.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval(template, &plus, &r) - eval(template, &minus, &r)) / (2.0 * FD_STEP);
        max_err = max_err.max(rel_err(products.dx.data()[i], numeric));
        compared += 1;
    }
    if let Some((dw, db)) = &products.delta {
        for (which, grad) in [(0, dw), (1, db)] {
            for i in 0..grad.len() {
                let bump = |delta: f64| {
                    let mut l = template.clone();
                    let t = if which == 0 { &mut l.kernel } else { &mut l.bias };
                    t.data_mut()[i] += delta;
                    eval(&l, input, &r)
                };
                let numeric = (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP);
                max_err = max_err.max(rel_err(grad.data()[i], numeric));
                compared += 1;
            }
        }
    }
    GradCheck {
        label: label.to_string(),
        max_rel_err: max_err,
        compared,
    }
}

fn dense(units: usize, input_dim: usize, seed: u64) -> LayerState {
    let mut rng = Rng::new(seed);
    LayerState::with_params(
        LayerKind::Dense { units, input_dim },
        random_tensor(&[input_dim, units], &mut rng),
        random_tensor(&[units], &mut rng),
        1,
    )
    .unwrap()
}

fn conv(filters: usize, kh: usize, kw: usize, in_ch: usize, stride: usize, padding: Padding, seed: u64) -> LayerState {
    let mut rng = Rng::new(seed);
    LayerState::with_params(
        LayerKind::Conv2D {
            filters,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        },
        random_tensor(&[kh, kw, in_ch, filters], &mut rng),
        random_tensor(&[filters], &mut rng),
        1,
    )
    .unwrap()
}

/// Layer-level instances: every layer kind, every activation, three seeds.
pub fn layer_checks() -> Vec<GradCheck> {
    let mut out = Vec::new();
    for seed in 1..=3u64 {
        let mut rng = Rng::new(seed * 101);
        out.push(check_layer("dense", &dense(3, 4, seed), &random_tensor(&[3, 4], &mut rng), seed));
        for act in Activation::ALL {
            let layer = LayerState::new(LayerKind::Activation(act), 1).unwrap();
            let x = away_from_zero(&[3, 4], 0.05, &mut rng);
            out.push(check_layer(&format!("activation {}", act.name()), &layer, &x, seed));
        }
        let drop = LayerState::new(LayerKind::Dropout { rate: 0.4 }, 1).unwrap();
        out.push(check_layer("dropout", &drop, &random_tensor(&[3, 5], &mut rng), seed));
        out.push(check_layer(
            "conv2d valid 3x3 s1",
            &conv(2, 3, 3, 2, 1, Padding::Valid, seed),
            &random_tensor(&[2, 5, 5, 2], &mut rng),
            seed,
        ));
        out.push(check_layer(
            "conv2d same 3x2 s2",
            &conv(3, 3, 2, 2, 2, Padding::Same, seed),
            &random_tensor(&[2, 5, 4, 2], &mut rng),
            seed,
        ));
        let pool = LayerState::new(
            LayerKind::MaxPool2D {
                pool_h: 2,
                pool_w: 2,
                stride: 2,
            },
            1,
        )
        .unwrap();
        out.push(check_layer("maxpool 2x2 s2", &pool, &random_tensor(&[2, 4, 4, 2], &mut rng), seed));
        let overlap = LayerState::new(
            LayerKind::MaxPool2D {
                pool_h: 3,
                pool_w: 3,
                stride: 1,
            },
            1,
        )
        .unwrap();
        out.push(check_layer("maxpool 3x3 s1", &overlap, &random_tensor(&[1, 5, 5, 1], &mut rng), seed));
        let flat = LayerState::new(LayerKind::Flatten, 1).unwrap();
        out.push(check_layer("flatten", &flat, &random_tensor(&[2, 3, 3, 2], &mut rng), seed));
    }
    out
}

/// Random (prediction, target) pair valid for `loss`, clear of clip limits and kinks.
pub fn loss_instance(loss: LossKind, rng: &mut Rng) -> (Tensor, Tensor) {
    let (rows, cols) = (4, 3);
    match loss {
        LossKind::Mse => (random_tensor(&[rows, cols], rng), random_tensor(&[rows, cols], rng)),
        LossKind::Mae => {
            let y = random_tensor(&[rows, cols], rng);
            let gap = away_from_zero(&[rows, cols], 0.05, rng);
            (y.add(&gap).unwrap(), y)
        }
        LossKind::BinaryCrossentropy => {
            let p = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.uniform_range(0.05, 0.95)).collect());
            let y = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.bernoulli(0.5) as u8 as f64).collect());
            (p.unwrap(), y.unwrap())
        }
        LossKind::CategoricalCrossentropy => {
            let p = softmax_rows(&random_tensor(&[rows, cols], rng));
            let mut y = vec![0.0; rows * cols];
            for r in 0..rows {
                y[r * cols + rng.below(cols)] = 1.0;
            }
            (p, Tensor::new(vec![rows, cols], y).unwrap())
        }
    }
}

/// Row-wise softmax computed directly, independent of the library's.
pub fn softmax_rows(z: &Tensor) -> Tensor {
    let cols = z.row_len();
    let mut out = Vec::with_capacity(z.len());
    for row in z.data().chunks(cols) {
        let exps: Vec<f64> = row.iter().map(|v| v.exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    Tensor::new(z.shape().to_vec(), out).unwrap()
}

/// Loss-level instances: each loss's gradient and the fused softmax path.
pub fn loss_checks() -> Vec<GradCheck> {
    let mut out = Vec::new();
    for seed in 1..=3u64 {
        let mut rng = Rng::new(seed * 7919);
        for loss in LossKind::ALL {
            let (p, y) = loss_instance(loss, &mut rng);
            let g = objectives::loss_grad(loss, &p, &y).unwrap();
            let mut max_err: f64 = 0.0;
            for i in 0..p.len() {
                let mut plus = p.clone();
                plus.data_mut()[i] += FD_STEP;
                let mut minus = p.clone();
                minus.data_mut()[i] -= FD_STEP;
                let numeric = (objectives::loss_value(loss, &plus, &y).unwrap()
                    - objectives::loss_value(loss, &minus, &y).unwrap())
                    / (2.0 * FD_STEP);
                max_err = max_err.max(rel_err(g.data()[i], numeric));
            }
            out.push(GradCheck {
                label: format!("loss {}", loss.name()),
                max_rel_err: max_err,
                compared: p.len(),
            });
        }
        let z = random_tensor(&[4, 3], &mut rng);
        let (_, y) = loss_instance(LossKind::CategoricalCrossentropy, &mut rng);
        let fused = objectives::softmax_cross_entropy_grad(&softmax_rows(&z), &y).unwrap();
        let f = |z: &Tensor| objectives::loss_value(LossKind::CategoricalCrossentropy, &softmax_rows(z), &y).unwrap();
        let mut max_err: f64 = 0.0;
        for i in 0..z.len() {
            let mut plus = z.clone();
            plus.data_mut()[i] += FD_STEP;
            let mut minus = z.clone();
            minus.data_mut()[i] -= FD_STEP;
            max_err = max_err.max(rel_err(fused.data()[i], (f(&plus) - f(&minus)) / (2.0 * FD_STEP)));
        }
        out.push(GradCheck {
            label: "fused softmax + categorical_crossentropy".into(),
            max_rel_err: max_err,
            compared: z.len(),
        });
    }
    out
}

pub fn output_activation(loss: LossKind) -> Activation {
    match loss {
        LossKind::Mse => Activation::Linear,
        LossKind::Mae => Activation::Tanh,
        LossKind::BinaryCrossentropy => Activation::Sigmoid,
        LossKind::CategoricalCrossentropy => Activation::Softmax,
    }
}

/// Conv -> pool -> flatten -> dropout -> dense, built from a spec document.
pub fn e2e_model(hidden: Activation, loss: LossKind, seed: u64) -> Model {
    let doc = format!(
        r#"{{
          "seed": {seed},
          "layers": [
            {{"type": "Conv2D", "filters": 3, "kernel_size": [3, 3], "padding": "same",
              "activation": "{hidden}", "input_shape": [4, 4, 2],
              "bias_initializer": {{"type": "random_normal", "stddev": 0.5}}}},
            {{"type": "MaxPooling2D", "pool_size": [2, 2]}},
            {{"type": "Flatten"}},
            {{"type": "Dropout", "rate": 0.25}},
            {{"type": "Dense", "units": 3, "activation": "{out}",
              "bias_initializer": {{"type": "random_normal", "stddev": 0.5}}}}
          ],
          "compile": {{"loss": "{loss}", "optimizer": {{"type": "sgd", "lr": 0.0}}}},
          "fit": {{"batch_size": 3, "epochs": 1}}
        }}"#,
        hidden = hidden.name(),
        out = output_activation(loss).name(),
        loss = loss.name(),
    );
    ModelSpec::from_json(&doc).unwrap().build().unwrap().0
}

fn step_loss(model: &Model, x: &Tensor, y: &Tensor) -> f64 {
    model.clone().train_step(x, y, None).unwrap().0
}

/// End-to-end check of one training step: parameter gradients and the input
/// gradient captured by the probes versus central differences of the loss.
/// Returns `None` when the instance sits too close to a kink to be meaningful.
pub fn check_e2e(hidden: Activation, loss: LossKind, seed: u64) -> Option<GradCheck> {
    let model = e2e_model(hidden, loss, seed);
    let mut rng = Rng::new(seed ^ 0xE2E);
    let x = random_tensor(&[3, 4, 4, 2], &mut rng);
    let y = match loss {
        LossKind::Mse | LossKind::Mae => random_tensor(&[3, 3], &mut rng).scale(0.5),
        LossKind::BinaryCrossentropy => Tensor::new(
            vec![3, 3],
            (0..9).map(|_| rng.bernoulli(0.5) as u8 as f64).collect(),
        )
        .unwrap(),
        LossKind::CategoricalCrossentropy => loss_instance(loss, &mut rng).1.slice_rows(0, 3).unwrap(),
    };

    let mut builder = SnapshotBuilder::new(0, 0, 0);
    model.clone().train_step(&x, &y, Some(&mut builder)).unwrap();
    builder.set_metrics(0.0, None);
    let snap = builder.build().unwrap();

    // Stay clear of the ReLU and |.| kinks.
    if hidden == Activation::Relu && snap.forward[0].pre_activation.data().iter().any(|v| v.abs() < 1e-4) {
        return None;
    }
    if loss == LossKind::Mae {
        let p = &snap.forward[1].post_activation;
        if p.data().iter().zip(y.data()).any(|(a, b)| (a - b).abs() < 1e-4) {
            return None;
        }
    }

    let mut max_err: f64 = 0.0;
    let mut compared = 0;
    let param_positions: Vec<usize> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_parameterized())
        .map(|(i, _)| i)
        .collect();
    for (pos, rec) in param_positions.iter().zip(snap.backward.iter().rev()) {
        let klen = model.layers[*pos].kernel.len();
        for i in 0..rec.delta_params_flat.len() {
            let bump = |delta: f64| {
                let mut m = model.clone();
                let layer = &mut m.layers[*pos];
                if i < klen {
                    layer.kernel.data_mut()[i] += delta;
                } else {
                    layer.bias.data_mut()[i - klen] += delta;
                }
                step_loss(&m, &x, &y)
            };
            let numeric = (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(rec.delta_params_flat.data()[i], numeric));
            compared += 1;
        }
    }
    let dx = &snap.backward.last().unwrap().propagated_gradient;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (step_loss(&model, &plus, &y) - step_loss(&model, &minus, &y)) / (2.0 * FD_STEP);
        max_err = max_err.max(rel_err(dx.data()[i], numeric));
        compared += 1;
    }
    Some(GradCheck {
        label: format!("model {} hidden + {}", hidden.name(), loss.name()),
        max_rel_err: max_err,
        compared,
    })
}

/// Every hidden activation x every loss, two usable seeds each.
pub fn e2e_checks() -> Vec<GradCheck> {
    let mut out = Vec::new();
    for loss in LossKind::ALL {
        for hidden in Activation::ALL {
            let mut found = 0;
            let mut seed = 1;
            while found < 2 {
                if let Some(c) = check_e2e(hidden, loss, seed) {
                    out.push(c);
                    found += 1;
                }
                seed += 1;
                assert!(seed < 50, "no kink-free instance for {hidden:?} + {loss:?}");
            }
        }
    }
    out
}

/// Ten Gaussian clusters in 8 dimensions with one-hot labels: a small
/// stand-in for a 10-class digit dataset. Features lie roughly in [0, 1].
pub fn ten_class_clusters() -> (Tensor, Tensor) {
    let (n, dims, classes) = (200, 8, 10);
    let mut rng = Rng::new(0x10C1A55);
    let centers: Vec<Vec<f64>> = (0..classes).map(|_| (0..dims).map(|_| rng.uniform()).collect()).collect();
    let mut x = Vec::with_capacity(n * dims);
    let mut y = vec![0.0; n * classes];
    for i in 0..n {
        let c = i % classes;
        x.extend(centers[c].iter().map(|m| m + rng.normal(0.0, 0.1)));
        y[i * classes + c] = 1.0;
    }
    (Tensor::new(vec![n, dims], x).unwrap(), Tensor::new(vec![n, classes], y).unwrap())
}

// ---------------------------------------------------------------------------
// Snapshot streams and a brute-force rescan oracle for the detector.

/// (layer, V3, updated params, delta params)
pub type RawBackward = (usize, Vec<f64>, Vec<f64>, Vec<f64>);

/// One batch of probe data in plain vectors.
#[derive(Clone, Debug)]
pub struct RawBatch {
    /// (layer, V1, V2)
    pub forward: Vec<(usize, Vec<f64>, Vec<f64>)>,
    pub loss: f64,
    pub accuracy: Option<f64>,
    /// Output layer first.
    pub backward: Vec<RawBackward>,
}

impl RawBatch {
    pub fn snapshot(&self, iteration: usize) -> BatchSnapshot {
        let t = |v: &Vec<f64>| Tensor::vector(v.clone());
        let mut b = SnapshotBuilder::new(iteration / 10, iteration % 10, iteration);
        for (l, v1, v2) in &self.forward {
            b.capture_forward(*l, &t(v1), &t(v2)).unwrap();
        }
        for (l, v3, w, dw) in &self.backward {
            b.capture_backward(*l, &t(v3), &t(w), &t(dw)).unwrap();
        }
        b.set_metrics(self.loss, self.accuracy);
        b.build().unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    V1,
    V2,
    V3,
    W,
}

#[derive(Clone, Debug)]
pub enum Anomaly {
    NonFinite { at: usize, layer: usize, slot: Slot, value: f64 },
    ZeroFrom { at: usize, layer: usize, slot: Slot },
    ConstantFrom { at: usize, layer: usize, slot: Slot },
    LossNonFinite { at: usize, value: f64 },
    AccuracyNaN { at: usize },
    AccuracyZero { at: usize, len: usize },
    Plateau { at: usize },
    /// Non-finite values in several layers and metrics on one batch, to
    /// exercise the check order within a batch.
    Storm { at: usize, mask: u32 },
}

#[derive(Clone, Debug)]
pub struct Stream {
    pub batches: Vec<RawBatch>,
    pub config: DetectorConfig,
    pub anomalies: Vec<Anomaly>,
}

pub const STREAM_LEN: usize = 30;

/// A healthy random stream with 1-3 injected anomalies; some seeds also
/// disable a random subset of checks and use different delta sources.
pub fn fuzz_stream(seed: u64) -> Stream {
    let mut rng = Rng::new(seed);
    let layers = 1 + rng.below(3);
    let width = 6;
    let with_accuracy = rng.bernoulli(0.8);
    let mut batches: Vec<RawBatch> = (0..STREAM_LEN)
        .map(|t| {
            let mut vec = |_: ()| (0..width).map(|_| rng.normal(0.3, 1.0)).collect::<Vec<f64>>();
            let forward = (1..=layers).map(|l| (l, vec(()), vec(()))).collect();
            let backward = (1..=layers).rev().map(|l| (l, vec(()), vec(()), vec(()))).collect();
            RawBatch {
                forward,
                loss: 5.0 - 0.1 * t as f64 + rng.uniform_range(-0.01, 0.01),
                accuracy: with_accuracy.then_some(0.3 + 0.01 * t as f64),
                backward,
            }
        })
        .collect();

    let slot_of = |rng: &mut Rng| [Slot::V1, Slot::V2, Slot::V3, Slot::W][rng.below(4)];
    let count = 1 + rng.below(3);
    let mut anomalies = Vec::new();
    for _ in 0..count {
        let at = rng.below(STREAM_LEN);
        let layer = 1 + rng.below(layers);
        let value = [f64::NAN, f64::INFINITY, f64::NEG_INFINITY][rng.below(3)];
        let a = match rng.below(9) {
            0 => Anomaly::NonFinite { at, layer, slot: slot_of(&mut rng), value },
            1 => Anomaly::ZeroFrom { at, layer, slot: slot_of(&mut rng) },
            2 => Anomaly::ConstantFrom { at, layer, slot: slot_of(&mut rng) },
            3 => Anomaly::LossNonFinite { at, value },
            4 => Anomaly::AccuracyNaN { at },
            5 => Anomaly::AccuracyZero { at, len: 1 + rng.below(3) },
            6 => Anomaly::Plateau { at },
            _ => Anomaly::Storm { at, mask: rng.next_u64() as u32 },
        };
        apply(&mut batches, &a);
        anomalies.push(a);
    }

    let mut disabled = BTreeSet::new();
    if rng.bernoulli(0.3) {
        for code in VerdictCode::ALL {
            if code != VerdictCode::CM && rng.bernoulli(0.3) {
                disabled.insert(code);
            }
        }
    }
    let config = DetectorConfig {
        window_n: 3 + rng.below(4),
        zero_threshold_fraction: 0.25,
        total_iterations: Some(20 + rng.below(30)),
        stagnation_steps: 2 + rng.below(5),
        stagnation_tolerance: 1e-4,
        eaf_zero_consecutive: 1 + rng.below(2),
        delta_source: if rng.bernoulli(0.5) {
            DeltaSource::PropagatedGradient
        } else {
            DeltaSource::ParameterGradient
        },
        disabled,
    };
    Stream {
        batches,
        config,
        anomalies,
    }
}

fn slot_mut(b: &mut RawBatch, layer: usize, slot: Slot) -> &mut Vec<f64> {
    match slot {
        Slot::V1 => &mut b.forward.iter_mut().find(|f| f.0 == layer).unwrap().1,
        Slot::V2 => &mut b.forward.iter_mut().find(|f| f.0 == layer).unwrap().2,
        Slot::V3 => &mut b.backward.iter_mut().find(|r| r.0 == layer).unwrap().1,
        Slot::W => &mut b.backward.iter_mut().find(|r| r.0 == layer).unwrap().2,
    }
}

fn apply(batches: &mut [RawBatch], a: &Anomaly) {
    match *a {
        Anomaly::NonFinite { at, layer, slot, value } => slot_mut(&mut batches[at], layer, slot)[2] = value,
        Anomaly::ZeroFrom { at, layer, slot } => {
            for b in &mut batches[at..] {
                slot_mut(b, layer, slot).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Anomaly::ConstantFrom { at, layer, slot } => {
            let frozen = slot_mut(&mut batches[at], layer, slot).clone();
            for b in &mut batches[at..] {
                *slot_mut(b, layer, slot) = frozen.clone();
            }
        }
        Anomaly::LossNonFinite { at, value } => batches[at].loss = value,
        Anomaly::AccuracyNaN { at } => {
            if batches[at].accuracy.is_some() {
                batches[at].accuracy = Some(f64::NAN);
            }
        }
        Anomaly::AccuracyZero { at, len } => {
            for b in batches.iter_mut().skip(at).take(len) {
                if b.accuracy.is_some() {
                    b.accuracy = Some(0.0);
                }
            }
        }
        Anomaly::Storm { at, mask } => {
            let b = &mut batches[at];
            let layers: Vec<usize> = b.forward.iter().map(|f| f.0).collect();
            let mut bit = 0;
            for l in layers {
                for slot in [Slot::V1, Slot::V2, Slot::V3, Slot::W] {
                    if mask & (1 << bit) != 0 {
                        slot_mut(b, l, slot)[0] = f64::NAN;
                    }
                    bit += 1;
                }
            }
            if mask & (1 << 20) != 0 {
                b.loss = f64::NAN;
            }
            if mask & (1 << 21) != 0 && b.accuracy.is_some() {
                b.accuracy = Some(f64::NAN);
            }
        }
        Anomaly::Plateau { at } => {
            let (loss, acc) = (batches[at].loss, batches[at].accuracy);
            for b in &mut batches[at..] {
                b.loss = loss;
                b.accuracy = acc;
            }
        }
    }
}

/// (code, layer, iteration) of the first failing check, or `None` for CM.
pub type Finding = Option<(VerdictCode, Option<usize>, usize)>;

fn plain_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Re-derives whether the ANA test fails at batch `t` from the whole prefix
/// of means for one key. Valid because no earlier call can have failed:
/// any failure ends the run.
fn ana_fails(means: &[f64], window: usize, zero_threshold: usize) -> bool {
    let m = *means.last().unwrap();
    if m.is_nan() || m.is_infinite() {
        return true;
    }
    if m == 0.0 && means.iter().filter(|v| **v == 0.0).count() >= zero_threshold {
        return true;
    }
    means.len() >= window && {
        let tail = &means[means.len() - window..];
        tail.iter().all(|v| v.to_bits() == tail[0].to_bits())
    }
}

/// Brute-force first failure: at every batch, recompute each check in the
/// fixed order (forward FW/AF per layer, loss, accuracy, stagnation, backward
/// BW/WT from the output layer down) from scratch over the stream prefix.
pub fn rescan(stream: &Stream) -> Finding {
    let cfg = &stream.config;
    let on = |c: VerdictCode| !cfg.disabled.contains(&c);
    let zero_threshold = ((cfg.zero_threshold_fraction * cfg.total_iterations.unwrap() as f64).ceil() as usize).max(1);
    let b = &stream.batches;
    let means = |t: usize, pick: &dyn Fn(&RawBatch) -> Vec<f64>| -> Vec<f64> {
        (0..=t).map(|i| plain_mean(&pick(&b[i]))).collect()
    };
    for t in 0..b.len() {
        for (layer, _, _) in &b[t].forward {
            let l = *layer;
            let v1 = means(t, &|r| r.forward.iter().find(|f| f.0 == l).unwrap().1.clone());
            if on(VerdictCode::EBA) && ana_fails(&v1, cfg.window_n, zero_threshold) {
                return Some((VerdictCode::EBA, Some(l), t));
            }
            let v2 = means(t, &|r| r.forward.iter().find(|f| f.0 == l).unwrap().2.clone());
            if on(VerdictCode::EAA) && ana_fails(&v2, cfg.window_n, zero_threshold) {
                return Some((VerdictCode::EAA, Some(l), t));
            }
        }
        if on(VerdictCode::ELF) && (b[t].loss.is_nan() || b[t].loss.is_infinite()) {
            return Some((VerdictCode::ELF, None, t));
        }
        if let Some(acc) = b[t].accuracy {
            let run = (0..=t).rev().take_while(|i| b[*i].accuracy == Some(0.0)).count();
            if on(VerdictCode::EAF) && (acc.is_nan() || acc.is_infinite() || run >= cfg.eaf_zero_consecutive) {
                return Some((VerdictCode::EAF, None, t));
            }
        }
        if on(VerdictCode::MDL) && t >= cfg.stagnation_steps {
            let k = cfg.stagnation_steps;
            let ls = (b[t].loss - b[t - k].loss) / k as f64;
            let stagnant = ls >= -cfg.stagnation_tolerance
                && match (b[t].accuracy, b[t - k].accuracy) {
                    (Some(a), Some(a0)) => (a - a0) / k as f64 <= cfg.stagnation_tolerance,
                    _ => true,
                };
            if stagnant {
                return Some((VerdictCode::MDL, None, t));
            }
        }
        for (layer, _, _, _) in &b[t].backward {
            let l = *layer;
            let rec = |r: &RawBatch| r.backward.iter().find(|x| x.0 == l).unwrap().clone();
            let delta = match cfg.delta_source {
                DeltaSource::PropagatedGradient => means(t, &|r| rec(r).1),
                DeltaSource::ParameterGradient => means(t, &|r| rec(r).3),
            };
            if on(VerdictCode::EBDW) && ana_fails(&delta, cfg.window_n, zero_threshold) {
                return Some((VerdictCode::EBDW, Some(l), t));
            }
            let w = means(t, &|r| rec(r).2);
            if on(VerdictCode::EBW) && ana_fails(&w, cfg.window_n, zero_threshold) {
                return Some((VerdictCode::EBW, Some(l), t));
            }
        }
    }
    None
}

/// Runs the real detector over the stream.
pub fn detect(stream: &Stream) -> Finding {
    let mut d = Detector::new(stream.config.clone()).unwrap();
    for (t, raw) in stream.batches.iter().enumerate() {
        if let Some(v) = d.check_batch(&raw.snapshot(t)).unwrap() {
            return Some((v.code, v.layer, v.iteration.unwrap()));
        }
    }
    None
}
