//! Instrumentation: per-batch snapshots of every value the detector checks,
//! and the observer interface that receives them.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::Verdict;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where in the training step an analyzed value comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Location {
    /// Layer output before the activation.
    FW,
    /// Layer output after the activation.
    AF,
    /// Gradient propagated to the previous layer.
    BW,
    /// Parameters after the optimizer update.
    WT,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardRecord {
    pub user_index: usize,
    pub pre_activation: Tensor,
    pub post_activation: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackwardRecord {
    pub user_index: usize,
    pub propagated_gradient: Tensor,
    /// Kernel then bias after the update, flattened. Empty for parameterless layers.
    pub updated_params_flat: Tensor,
    /// Raw kernel then bias gradients, flattened. Empty for parameterless layers.
    pub delta_params_flat: Tensor,
}

impl BackwardRecord {
    pub fn has_params(&self) -> bool {
        !self.updated_params_flat.is_empty()
    }
}

/// Everything observed during one training batch. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSnapshot {
    pub epoch: usize,
    pub batch: usize,
    pub global_iteration: usize,
    pub forward: Vec<ForwardRecord>,
    pub loss: f64,
    pub accuracy: Option<f64>,
    /// In reverse layer order.
    pub backward: Vec<BackwardRecord>,
}

/// Collects records for one batch and enforces capture order.
#[derive(Debug)]
pub struct SnapshotBuilder {
    epoch: usize,
    batch: usize,
    global_iteration: usize,
    forward: Vec<ForwardRecord>,
    backward: Vec<BackwardRecord>,
    metrics: Option<(f64, Option<f64>)>,
}

impl SnapshotBuilder {
    pub fn new(epoch: usize, batch: usize, global_iteration: usize) -> Self {
        Self {
            epoch,
            batch,
            global_iteration,
            forward: Vec::new(),
            backward: Vec::new(),
            metrics: None,
        }
    }

    pub fn capture_forward(&mut self, user_index: usize, v1: &Tensor, v2: &Tensor) -> Result<()> {
        if let Some(last) = self.forward.last() {
            if user_index <= last.user_index {
                return Err(Error::Protocol(format!(
                    "forward capture for layer {user_index} after layer {} in iteration {}",
                    last.user_index, self.global_iteration
                )));
            }
        }
        self.forward.push(ForwardRecord {
            user_index,
            pre_activation: v1.clone(),
            post_activation: v2.clone(),
        });
        Ok(())
    }

    pub fn capture_backward(&mut self, user_index: usize, v3: &Tensor, w_flat: &Tensor, dw_flat: &Tensor) -> Result<()> {
        if let Some(last) = self.backward.last() {
            if user_index >= last.user_index {
                return Err(Error::Protocol(format!(
                    "backward capture for layer {user_index} after layer {} in iteration {}; \
                     backward records must run from the output layer down",
                    last.user_index, self.global_iteration
                )));
            }
        }
        self.backward.push(BackwardRecord {
            user_index,
            propagated_gradient: v3.clone(),
            updated_params_flat: w_flat.clone(),
            delta_params_flat: dw_flat.clone(),
        });
        Ok(())
    }

    pub fn set_metrics(&mut self, loss: f64, accuracy: Option<f64>) {
        self.metrics = Some((loss, accuracy));
    }

    pub fn build(self) -> Result<BatchSnapshot> {
        if self.forward.is_empty() {
            return Err(Error::Protocol(format!(
                "snapshot for iteration {} has no forward records",
                self.global_iteration
            )));
        }
        let (loss, accuracy) = self.metrics.ok_or_else(|| {
            Error::Protocol(format!("snapshot for iteration {} has no loss", self.global_iteration))
        })?;
        Ok(BatchSnapshot {
            epoch: self.epoch,
            batch: self.batch,
            global_iteration: self.global_iteration,
            forward: self.forward,
            loss,
            accuracy,
            backward: self.backward,
        })
    }
}

/// The shape of a training run, announced to observers before the first batch.
#[derive(Clone, Copy, Debug)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub started: Instant,
}

impl TrainPlan {
    pub fn total_iterations(&self) -> usize {
        self.epochs * self.batches_per_epoch
    }
}

/// Receives a snapshot at the end of every batch. Returning a verdict stops
/// training immediately.
pub trait Observer {
    fn name(&self) -> &str;

    fn on_train_begin(&mut self, _plan: &TrainPlan) {}

    fn on_batch_end(&mut self, snapshot: &BatchSnapshot) -> Option<Verdict>;

    /// Called once when training ran to completion. An observer may return
    /// the final verdict here (the detector returns CM).
    fn on_train_end(&mut self) -> Option<Verdict> {
        None
    }
}

#[derive(Debug, Serialize)]
struct Stats {
    mean: Option<f64>,
    std: Option<f64>,
}

impl Stats {
    fn of(t: &Tensor) -> Self {
        Self {
            mean: t.mean().ok(),
            std: t.std().ok(),
        }
    }
}

#[derive(Debug, Serialize)]
struct TraceForward {
    layer: usize,
    pre_activation: Stats,
    post_activation: Stats,
}

#[derive(Debug, Serialize)]
struct TraceBackward {
    layer: usize,
    propagated_gradient: Stats,
    weights: Stats,
    delta_weights: Stats,
}

#[derive(Debug, Serialize)]
struct TraceLine {
    epoch: usize,
    batch: usize,
    iteration: usize,
    loss: f64,
    accuracy: Option<f64>,
    forward: Vec<TraceForward>,
    backward: Vec<TraceBackward>,
}

/// Streams one summarized JSON object per snapshot (JSON Lines). Never stops
/// training; the first write error is kept and reported by [`TraceWriter::finish`].
pub struct TraceWriter<W: Write> {
    out: W,
    error: Option<std::io::Error>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out, error: None }
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }

    fn write_line(&mut self, snapshot: &BatchSnapshot) -> std::io::Result<()> {
        let line = TraceLine {
            epoch: snapshot.epoch,
            batch: snapshot.batch,
            iteration: snapshot.global_iteration,
            loss: snapshot.loss,
            accuracy: snapshot.accuracy,
            forward: snapshot
                .forward
                .iter()
                .map(|r| TraceForward {
                    layer: r.user_index,
                    pre_activation: Stats::of(&r.pre_activation),
                    post_activation: Stats::of(&r.post_activation),
                })
                .collect(),
            backward: snapshot
                .backward
                .iter()
                .map(|r| TraceBackward {
                    layer: r.user_index,
                    propagated_gradient: Stats::of(&r.propagated_gradient),
                    weights: Stats::of(&r.updated_params_flat),
                    delta_weights: Stats::of(&r.delta_params_flat),
                })
                .collect(),
        };
        serde_json::to_writer(&mut self.out, &line)?;
        self.out.write_all(b"\n")
    }
}

impl<W: Write> Observer for TraceWriter<W> {
    fn name(&self) -> &str {
        "trace"
    }

    fn on_batch_end(&mut self, snapshot: &BatchSnapshot) -> Option<Verdict> {
        if self.error.is_none() {
            if let Err(e) = self.write_line(snapshot) {
                self.error = Some(e);
            }
        }
        None
    }
}
