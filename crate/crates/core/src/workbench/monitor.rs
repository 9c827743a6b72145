use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::detector::{Detector, DetectorConfig, EarlyStopping, Monitored, TerminateOnNaN, Verdict};
use crate::engine::{fit, TrainOutcome};
use crate::error::{Error, Result};
use crate::objectives::Task;
use crate::probes::Observer;

use super::dataset::Dataset;
use super::spec::ModelSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MonitorKind {
    DeepLocalize,
    TerminateOnNaN,
    EarlyStopLoss,
    EarlyStopAcc,
}

impl MonitorKind {
    pub const ALL: [MonitorKind; 4] = [
        MonitorKind::DeepLocalize,
        MonitorKind::TerminateOnNaN,
        MonitorKind::EarlyStopLoss,
        MonitorKind::EarlyStopAcc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MonitorKind::DeepLocalize => "deeplocalize",
            MonitorKind::TerminateOnNaN => "terminate-on-nan",
            MonitorKind::EarlyStopLoss => "early-stop-loss",
            MonitorKind::EarlyStopAcc => "early-stop-acc",
        }
    }

    /// Whether the monitor can name a layer at all. The baselines cannot.
    pub fn localizes(self) -> bool {
        self == MonitorKind::DeepLocalize
    }

    pub fn build(self, task: Task, detector: &DetectorConfig) -> Result<Box<dyn Observer>> {
        Ok(match self {
            MonitorKind::DeepLocalize => Box::new(Detector::new(detector.clone())?),
            MonitorKind::TerminateOnNaN => Box::new(TerminateOnNaN::new()),
            MonitorKind::EarlyStopLoss => Box::new(EarlyStopping::with_defaults(Monitored::Loss, task)?),
            MonitorKind::EarlyStopAcc => Box::new(EarlyStopping::with_defaults(Monitored::Accuracy, task)?),
        })
    }
}

impl fmt::Display for MonitorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MonitorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MonitorKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown monitor `{s}`")))
    }
}

/// Builds `spec`, applies its input scale to the data, and trains with the
/// given monitors attached in order.
pub fn train_spec(
    spec: &ModelSpec,
    dataset: &Dataset,
    monitors: &[MonitorKind],
    detector: &DetectorConfig,
) -> Result<TrainOutcome> {
    train_spec_with(spec, dataset, monitors, detector, &mut [])
}

/// Like [`train_spec`], with extra observers (e.g. a trace writer) attached
/// ahead of the monitors so they see every snapshot, including the last.
pub fn train_spec_with(
    spec: &ModelSpec,
    dataset: &Dataset,
    monitors: &[MonitorKind],
    detector: &DetectorConfig,
    extra: &mut [&mut dyn Observer],
) -> Result<TrainOutcome> {
    let (mut model, config) = spec.build()?;
    let mut owned = monitors
        .iter()
        .map(|m| m.build(model.task, detector))
        .collect::<Result<Vec<_>>>()?;
    let x = if spec.fit.input_scale == 1.0 {
        dataset.x.clone()
    } else {
        dataset.x.scale(spec.fit.input_scale)
    };
    let mut observers: Vec<&mut dyn Observer> = Vec::with_capacity(extra.len() + owned.len());
    for o in extra.iter_mut() {
        observers.push(&mut **o);
    }
    for o in owned.iter_mut() {
        observers.push(o.as_mut());
    }
    fit(&mut model, &x, &dataset.y, &config, &mut observers)
}

/// What `train` writes: the verdict plus a few training facts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    #[serde(flatten)]
    pub verdict: Verdict,
    pub monitor: Option<String>,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub loss_history_len: usize,
    pub accuracy_history_len: usize,
    pub batches_executed: usize,
    pub epochs_run: usize,
}

impl TrainReport {
    pub fn from_outcome(outcome: &TrainOutcome) -> Self {
        Self {
            verdict: outcome.verdict.clone(),
            monitor: outcome.decided_by.clone(),
            final_loss: outcome.final_loss(),
            final_accuracy: outcome.final_accuracy(),
            loss_history_len: outcome.loss_history.len(),
            accuracy_history_len: outcome.accuracy_history.len(),
            batches_executed: outcome.batches_executed,
            epochs_run: outcome.epochs.len(),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
