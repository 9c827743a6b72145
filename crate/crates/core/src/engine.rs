//! The instrumented mini-batch training loop.

use std::time::Instant;

use crate::detector::Verdict;
use crate::error::{Error, Result};
use crate::layers::{Activation, LayerKind, LayerState};
use crate::objectives::{self, LossKind, OptimizerKind, Task};
use crate::probes::{Observer, SnapshotBuilder, TrainPlan};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Model {
    pub layers: Vec<LayerState>,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub task: Task,
    pub rng: Rng,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

impl Model {
    /// `input_shape` excludes the batch dimension.
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerState>,
        loss: LossKind,
        optimizer: OptimizerKind,
        task: Task,
        rng: Rng,
    ) -> Result<Self> {
        if !layers.iter().any(LayerState::is_parameterized) {
            return Err(Error::Config("model needs at least one Dense or Conv2D layer".into()));
        }
        let lr = optimizer.lr();
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {lr} must be finite and >= 0")));
        }
        let mut shape: Vec<usize> = std::iter::once(1).chain(input_shape.iter().copied()).collect();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        Ok(Self {
            layers,
            loss,
            optimizer,
            task,
            rng,
            input_shape,
            output_shape: shape[1..].to_vec(),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn parameterized_layers(&self) -> impl Iterator<Item = &LayerState> {
        self.layers.iter().filter(|l| l.is_parameterized())
    }

    /// Softmax output trained with categorical cross-entropy: the backward
    /// pass starts from `(p - y) / batch` below the softmax.
    fn fused_softmax_cross_entropy(&self) -> bool {
        self.loss == LossKind::CategoricalCrossentropy
            && matches!(
                self.layers.last().map(|l| &l.kind),
                Some(LayerKind::Activation(Activation::Softmax))
            )
    }

    /// One forward/backward/update step on a batch. Records probes into
    /// `probe` when given. Returns (loss, accuracy).
    pub fn train_step(&mut self, x: &Tensor, y: &Tensor, mut probe: Option<&mut SnapshotBuilder>) -> Result<(f64, Option<f64>)> {
        let mut h = x.clone();
        let mut pending: Option<(usize, Tensor)> = None;
        for i in 0..self.layers.len() {
            let out = self.layers[i].forward(&h, true, &mut self.rng)?;
            let layer = &self.layers[i];
            if let Some(sink) = probe.as_deref_mut() {
                let next_is_activation = matches!(
                    self.layers.get(i + 1).map(|l| &l.kind),
                    Some(LayerKind::Activation(_))
                );
                if layer.is_parameterized() {
                    if next_is_activation {
                        pending = Some((layer.user_index, out.clone()));
                    } else {
                        sink.capture_forward(layer.user_index, &out, &out)?;
                    }
                } else if let (LayerKind::Activation(_), Some((index, v1))) = (&layer.kind, pending.take()) {
                    sink.capture_forward(index, &v1, &out)?;
                }
            }
            h = out;
        }

        let loss = objectives::loss_value(self.loss, &h, y)?;
        let accuracy = objectives::accuracy(&h, y, self.task)?;
        if let Some(sink) = probe.as_deref_mut() {
            sink.set_metrics(loss, accuracy);
        }

        let (mut dy, top) = if self.fused_softmax_cross_entropy() {
            (objectives::softmax_cross_entropy_grad(&h, y)?, self.layers.len() - 1)
        } else {
            (objectives::loss_grad(self.loss, &h, y)?, self.layers.len())
        };
        let optimizer = self.optimizer;
        for layer in self.layers[..top].iter_mut().rev() {
            let products = layer.backward(&dy, &optimizer)?;
            if let (Some(sink), Some((w, b)), Some((dw, db))) =
                (probe.as_deref_mut(), &products.updated, &products.delta)
            {
                sink.capture_backward(
                    layer.user_index,
                    &products.dx,
                    &Tensor::concat_flat(&[w, b]),
                    &Tensor::concat_flat(&[dw, db]),
                )?;
            }
            dy = products.dx;
        }
        Ok((loss, accuracy))
    }

    /// Inference pass: dropout disabled, no probes.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.rows() == 0 {
            return Err(Error::Contract("predict on an empty batch".into()));
        }
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, false, &mut self.rng)?;
        }
        Ok(h)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if &x.shape()[1..] != self.input_shape.as_slice() {
            return Err(Error::shape(
                "model input",
                format!("{:?}, expected [batch] + {:?}", x.shape(), self.input_shape),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle: bool,
    /// Seeds the shuffling order only.
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(batch_size: usize, epochs: usize) -> Self {
        Self {
            batch_size,
            epochs,
            shuffle: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub batches: usize,
    pub mean_loss: f64,
    pub mean_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub verdict: Verdict,
    /// Name of the observer that produced the verdict, if any did.
    pub decided_by: Option<String>,
    pub epochs: Vec<EpochSummary>,
    pub batches_executed: usize,
    pub elapsed_seconds: f64,
    pub loss_history: Vec<f64>,
    pub accuracy_history: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.accuracy_history.last().copied()
    }
}

pub fn batches_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size)
}

/// Trains `model` on `(x, y)`, emitting one snapshot per batch to every
/// observer in order. The first verdict stops training.
pub fn fit(
    model: &mut Model,
    x: &Tensor,
    y: &Tensor,
    config: &TrainConfig,
    observers: &mut [&mut dyn Observer],
) -> Result<TrainOutcome> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::Contract("empty dataset".into()));
    }
    if y.rows() != n {
        return Err(Error::shape("fit", format!("x has {n} rows, y has {}", y.rows())));
    }
    model.check_input(x)?;
    if &y.shape()[1..] != model.output_shape() {
        return Err(Error::shape(
            "fit labels",
            format!("{:?}, model output is [batch] + {:?}", y.shape(), model.output_shape()),
        ));
    }
    if config.batch_size == 0 || config.batch_size > n {
        return Err(Error::Config(format!(
            "batch size {} must be in 1..={n}",
            config.batch_size
        )));
    }
    if config.epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }

    let per_epoch = batches_per_epoch(n, config.batch_size);
    let plan = TrainPlan {
        epochs: config.epochs,
        batches_per_epoch: per_epoch,
        started: Instant::now(),
    };
    for obs in observers.iter_mut() {
        obs.on_train_begin(&plan);
    }
    let instrumented = !observers.is_empty();
    let mut shuffler = Rng::new(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut outcome = TrainOutcome {
        verdict: Verdict::correct_model(None, 0.0),
        decided_by: None,
        epochs: Vec::with_capacity(config.epochs),
        batches_executed: 0,
        elapsed_seconds: 0.0,
        loss_history: Vec::new(),
        accuracy_history: Vec::new(),
    };
    let mut fired: Option<(String, Verdict)> = None;

    'epochs: for epoch in 0..config.epochs {
        if config.shuffle {
            shuffler.shuffle(&mut order);
        }
        let mut summary = EpochSummary {
            epoch,
            batches: 0,
            mean_loss: 0.0,
            mean_accuracy: None,
        };
        let mut acc_sum = 0.0;
        for batch in 0..per_epoch {
            let start = batch * config.batch_size;
            let end = (start + config.batch_size).min(n);
            let (xb, yb) = if config.shuffle {
                (x.select_rows(&order[start..end])?, y.select_rows(&order[start..end])?)
            } else {
                (x.slice_rows(start, end)?, y.slice_rows(start, end)?)
            };
            let iteration = outcome.batches_executed;
            let mut builder = instrumented.then(|| SnapshotBuilder::new(epoch, batch, iteration));
            let (loss, accuracy) = model.train_step(&xb, &yb, builder.as_mut())?;

            outcome.batches_executed += 1;
            outcome.loss_history.push(loss);
            summary.batches += 1;
            summary.mean_loss += loss;
            if let Some(a) = accuracy {
                outcome.accuracy_history.push(a);
                acc_sum += a;
            }

            if let Some(builder) = builder {
                let snapshot = builder.build()?;
                for obs in observers.iter_mut() {
                    if let Some(verdict) = obs.on_batch_end(&snapshot) {
                        fired = Some((obs.name().to_string(), verdict));
                        break;
                    }
                }
            }
            if fired.is_some() {
                close_summary(&mut summary, acc_sum, model.task);
                outcome.epochs.push(summary);
                break 'epochs;
            }
        }
        close_summary(&mut summary, acc_sum, model.task);
        outcome.epochs.push(summary);
    }

    outcome.elapsed_seconds = plan.started.elapsed().as_secs_f64();
    match fired {
        Some((name, verdict)) => {
            outcome.verdict = verdict;
            outcome.decided_by = Some(name);
        }
        None => {
            for obs in observers.iter_mut() {
                if let Some(verdict) = obs.on_train_end() {
                    outcome.decided_by = Some(obs.name().to_string());
                    outcome.verdict = verdict;
                    return Ok(outcome);
                }
            }
            let last = outcome
                .epochs
                .last()
                .map(|e| (e.epoch, e.batches - 1, outcome.batches_executed - 1));
            outcome.verdict = Verdict::correct_model(last, outcome.elapsed_seconds);
        }
    }
    Ok(outcome)
}

fn close_summary(summary: &mut EpochSummary, acc_sum: f64, task: Task) {
    let batches = summary.batches.max(1) as f64;
    summary.mean_loss /= batches;
    if task != Task::None {
        summary.mean_accuracy = Some(acc_sum / batches);
    }
}
