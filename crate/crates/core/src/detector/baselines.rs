//! Framework-style callbacks used as comparison points. They watch only the
//! loss or accuracy and never name a layer.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::objectives::Task;
use crate::probes::{BatchSnapshot, Observer, TrainPlan};

use super::verdict::{Verdict, VerdictCode};

/// Stops when the batch loss is NaN. Infinite losses do not stop training.
#[derive(Clone, Debug)]
pub struct TerminateOnNaN {
    started: Instant,
}

impl Default for TerminateOnNaN {
    fn default() -> Self {
        Self { started: Instant::now() }
    }
}

impl TerminateOnNaN {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn check(&self, snapshot: &BatchSnapshot) -> Option<Verdict> {
        snapshot.loss.is_nan().then(|| {
            Verdict::at(
                VerdictCode::ELF,
                None,
                snapshot,
                self.started.elapsed().as_secs_f64(),
                format!("TerminateOnNaN: loss is NaN at batch {}", snapshot.batch),
            )
        })
    }
}

impl Observer for TerminateOnNaN {
    fn name(&self) -> &str {
        "terminate-on-nan"
    }

    fn on_train_begin(&mut self, plan: &TrainPlan) {
        self.started = plan.started;
    }

    fn on_batch_end(&mut self, snapshot: &BatchSnapshot) -> Option<Verdict> {
        self.check(snapshot)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Monitored {
    Loss,
    Accuracy,
}

impl Monitored {
    pub fn as_str(self) -> &'static str {
        match self {
            Monitored::Loss => "loss",
            Monitored::Accuracy => "accuracy",
        }
    }
}

/// Stops after `patience` consecutive batches without an improvement larger
/// than `min_delta`.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    monitor: Monitored,
    patience: usize,
    min_delta: f64,
    best: Option<f64>,
    wait: usize,
    started: Instant,
}

impl EarlyStopping {
    pub fn new(monitor: Monitored, patience: usize, min_delta: f64, task: Task) -> Result<Self> {
        if monitor == Monitored::Accuracy && task == Task::None {
            return Err(Error::Config(
                "EarlyStopping cannot monitor accuracy on a model without an accuracy metric".into(),
            ));
        }
        if patience == 0 {
            return Err(Error::Config("EarlyStopping patience must be >= 1".into()));
        }
        if min_delta.is_nan() || min_delta < 0.0 {
            return Err(Error::Config("EarlyStopping min_delta must be >= 0".into()));
        }
        Ok(Self {
            monitor,
            patience,
            min_delta,
            best: None,
            wait: 0,
            started: Instant::now(),
        })
    }

    /// Batch-level defaults: patience 1, min_delta 0.
    pub fn with_defaults(monitor: Monitored, task: Task) -> Result<Self> {
        Self::new(monitor, 1, 0.0, task)
    }

    fn improved(&self, value: f64) -> bool {
        match (self.best, self.monitor) {
            (_, _) if value.is_nan() => false,
            (None, _) => true,
            (Some(best), Monitored::Loss) => value < best - self.min_delta,
            (Some(best), Monitored::Accuracy) => value > best + self.min_delta,
        }
    }

    pub fn observe(&mut self, snapshot: &BatchSnapshot) -> Option<Verdict> {
        let value = match self.monitor {
            Monitored::Loss => snapshot.loss,
            Monitored::Accuracy => snapshot.accuracy.unwrap_or(f64::NAN),
        };
        if self.improved(value) {
            self.best = Some(value);
            self.wait = 0;
            return None;
        }
        self.wait += 1;
        (self.wait >= self.patience).then(|| {
            Verdict::at(
                VerdictCode::MDL,
                None,
                snapshot,
                self.started.elapsed().as_secs_f64(),
                format!(
                    "EarlyStopping({}): no improvement for {} batch(es)",
                    self.monitor.as_str(),
                    self.wait
                ),
            )
        })
    }
}

impl Observer for EarlyStopping {
    fn name(&self) -> &str {
        match self.monitor {
            Monitored::Loss => "early-stop-loss",
            Monitored::Accuracy => "early-stop-acc",
        }
    }

    fn on_train_begin(&mut self, plan: &TrainPlan) {
        self.started = plan.started;
    }

    fn on_batch_end(&mut self, snapshot: &BatchSnapshot) -> Option<Verdict> {
        self.observe(snapshot)
    }
}
