//! Loss functions, the accuracy metric, optimizers and weight initializers.
//!
//! Losses and their gradients use the batch-mean convention: both are divided
//! by the number of rows in the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Clip applied to predictions before any logarithm in cross-entropy.
pub const CROSS_ENTROPY_EPSILON: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[serde(alias = "mean_squared_error")]
    Mse,
    #[serde(alias = "mean_absolute_error")]
    Mae,
    BinaryCrossentropy,
    CategoricalCrossentropy,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Mse,
        LossKind::Mae,
        LossKind::BinaryCrossentropy,
        LossKind::CategoricalCrossentropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
            LossKind::BinaryCrossentropy => "binary_crossentropy",
            LossKind::CategoricalCrossentropy => "categorical_crossentropy",
        }
    }

    pub fn parse(name: &str) -> Option<LossKind> {
        match name {
            "mse" | "mean_squared_error" => Some(LossKind::Mse),
            "mae" | "mean_absolute_error" => Some(LossKind::Mae),
            "binary_crossentropy" => Some(LossKind::BinaryCrossentropy),
            "categorical_crossentropy" => Some(LossKind::CategoricalCrossentropy),
            _ => None,
        }
    }
}

fn clip(p: f64) -> f64 {
    p.clamp(CROSS_ENTROPY_EPSILON, 1.0 - CROSS_ENTROPY_EPSILON)
}

fn batch_rows(t: &Tensor) -> f64 {
    t.rows() as f64
}

pub fn loss_value(kind: LossKind, y_pred: &Tensor, y_true: &Tensor) -> Result<f64> {
    y_pred.expect_same_shape(y_true, "loss")?;
    let n = batch_rows(y_pred);
    let per_row_mean = y_pred.row_len() as f64;
    let pairs = y_pred.data().iter().zip(y_true.data());
    let total: f64 = match kind {
        LossKind::Mse => pairs.map(|(p, y)| (p - y).powi(2)).sum::<f64>() / per_row_mean,
        LossKind::Mae => pairs.map(|(p, y)| (p - y).abs()).sum::<f64>() / per_row_mean,
        LossKind::BinaryCrossentropy => {
            pairs
                .map(|(&p, &y)| {
                    let p = clip(p);
                    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                })
                .sum::<f64>()
                / per_row_mean
        }
        LossKind::CategoricalCrossentropy => pairs.map(|(&p, &y)| -y * clip(p).ln()).sum(),
    };
    Ok(total / n)
}

/// Gradient of [`loss_value`] with respect to `y_pred`.
///
/// Inside the clipped region of cross-entropy the derivative is zero, which
/// is what finite differences of the clipped loss measure as well.
pub fn loss_grad(kind: LossKind, y_pred: &Tensor, y_true: &Tensor) -> Result<Tensor> {
    y_pred.expect_same_shape(y_true, "loss gradient")?;
    let n = batch_rows(y_pred);
    let per_row_mean = y_pred.row_len() as f64;
    let in_clip = |p: f64| (CROSS_ENTROPY_EPSILON..=1.0 - CROSS_ENTROPY_EPSILON).contains(&p);
    match kind {
        LossKind::Mse => y_pred.zip_map(y_true, "loss gradient", |p, y| {
            2.0 * (p - y) / (n * per_row_mean)
        }),
        LossKind::Mae => y_pred.zip_map(y_true, "loss gradient", |p, y| {
            let d = p - y;
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else if d.is_nan() {
                f64::NAN
            } else {
                0.0
            };
            sign / (n * per_row_mean)
        }),
        LossKind::BinaryCrossentropy => y_pred.zip_map(y_true, "loss gradient", |p, y| {
            if p.is_nan() {
                return f64::NAN;
            }
            if !in_clip(p) {
                return 0.0;
            }
            (-y / p + (1.0 - y) / (1.0 - p)) / (n * per_row_mean)
        }),
        LossKind::CategoricalCrossentropy => y_pred.zip_map(y_true, "loss gradient", |p, y| {
            if p.is_nan() {
                return f64::NAN;
            }
            if !in_clip(p) {
                return 0.0;
            }
            -y / p / n
        }),
    }
}

/// Gradient of softmax followed by categorical cross-entropy, taken with
/// respect to the softmax input: `(p - y) / batch`.
pub fn softmax_cross_entropy_grad(probs: &Tensor, y_true: &Tensor) -> Result<Tensor> {
    let n = batch_rows(probs);
    probs.zip_map(y_true, "softmax cross-entropy gradient", |p, y| (p - y) / n)
}

/// How accuracy is computed for a model, if at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Single sigmoid-style output thresholded at 0.5.
    Binary,
    /// Argmax over the output row.
    Categorical,
    /// Regression: no accuracy.
    None,
}

pub fn accuracy(y_pred: &Tensor, y_true: &Tensor, task: Task) -> Result<Option<f64>> {
    y_pred.expect_same_shape(y_true, "accuracy")?;
    let rows = y_pred.rows();
    let correct = match task {
        Task::None => return Ok(None),
        Task::Binary => y_pred
            .data()
            .iter()
            .zip(y_true.data())
            .filter(|(&p, &y)| ((p > 0.5) as u8 as f64) == y.round())
            .count() as f64
            / y_pred.row_len() as f64,
        Task::Categorical => {
            if y_pred.has_non_finite() {
                return Ok(Some(f64::NAN));
            }
            y_pred
                .argmax_rows()
                .into_iter()
                .zip(y_true.argmax_rows())
                .filter(|(p, y)| p == y)
                .count() as f64
        }
    };
    if task == Task::Binary && y_pred.has_non_finite() {
        return Ok(Some(f64::NAN));
    }
    Ok(Some(correct / rows as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { lr: f64, momentum: f64 },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerKind {
    pub fn sgd(lr: f64) -> Self {
        OptimizerKind::Sgd { lr, momentum: 0.0 }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }

    /// Applies one update and returns the new parameter value.
    pub fn step(&self, slot: &mut Slot, param: &Tensor, grad: &Tensor) -> Result<Tensor> {
        param.expect_same_shape(grad, "optimizer step")?;
        match *self {
            OptimizerKind::Sgd { lr, momentum } => {
                let velocity = slot.sgd_velocity(param.shape())?;
                for (v, g) in velocity.data_mut().iter_mut().zip(grad.data()) {
                    *v = momentum * *v + g;
                }
                param.zip_map(velocity, "optimizer step", |p, v| p - lr * v)
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                epsilon,
            } => {
                let (m, v, t) = slot.adam_moments(param.shape())?;
                *t += 1;
                let correction1 = 1.0 - beta1.powi(*t as i32);
                let correction2 = 1.0 - beta2.powi(*t as i32);
                let mut out = param.clone();
                for (((p, g), m), v) in out
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / correction1;
                    let v_hat = *v / correction2;
                    *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
                Ok(out)
            }
        }
    }
}

/// Per-parameter optimizer state. Created empty; shaped to the parameter on
/// first use.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Slot {
    #[default]
    Empty,
    Sgd { velocity: Tensor },
    Adam { m: Tensor, v: Tensor, t: u64 },
}

impl Slot {
    fn sgd_velocity(&mut self, shape: &[usize]) -> Result<&mut Tensor> {
        if matches!(self, Slot::Empty) {
            *self = Slot::Sgd {
                velocity: Tensor::zeros(shape),
            };
        }
        match self {
            Slot::Sgd { velocity } if velocity.shape() == shape => Ok(velocity),
            _ => Err(Error::shape("optimizer slot", "slot does not match parameter")),
        }
    }

    fn adam_moments(&mut self, shape: &[usize]) -> Result<(&mut Tensor, &mut Tensor, &mut u64)> {
        if matches!(self, Slot::Empty) {
            *self = Slot::Adam {
                m: Tensor::zeros(shape),
                v: Tensor::zeros(shape),
                t: 0,
            };
        }
        match self {
            Slot::Adam { m, v, t } if m.shape() == shape => Ok((m, v, t)),
            _ => Err(Error::shape("optimizer slot", "slot does not match parameter")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InitializerKind {
    RandomNormal { stddev: f64 },
    GlorotUniform,
    Zeros,
}

/// Draws a parameter tensor. `fans` is `(fan_in, fan_out)` and is only used by
/// Glorot initialization.
pub fn initialize(kind: InitializerKind, shape: &[usize], fans: (usize, usize), rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    match kind {
        InitializerKind::Zeros => {}
        InitializerKind::RandomNormal { stddev } => {
            for v in t.data_mut() {
                *v = rng.normal(0.0, stddev);
            }
        }
        InitializerKind::GlorotUniform => {
            let bound = glorot_bound(fans.0, fans.1);
            for v in t.data_mut() {
                *v = rng.uniform_range(-bound, bound);
            }
        }
    }
    t
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
