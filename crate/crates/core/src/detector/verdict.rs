use std::fmt;

use serde::{Deserialize, Serialize};

use crate::probes::BatchSnapshot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VerdictCode {
    /// Error before activation.
    EBA,
    /// Error after activation.
    EAA,
    /// Error in the loss function.
    ELF,
    /// Error in the accuracy function.
    EAF,
    /// Error in the (updated) weights.
    EBW,
    /// Error in the backward delta.
    EBDW,
    /// Model does not learn.
    MDL,
    /// Correct model.
    CM,
}

impl VerdictCode {
    pub const ALL: [VerdictCode; 8] = [
        VerdictCode::EBA,
        VerdictCode::EAA,
        VerdictCode::ELF,
        VerdictCode::EAF,
        VerdictCode::EBW,
        VerdictCode::EBDW,
        VerdictCode::MDL,
        VerdictCode::CM,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VerdictCode::EBA => "EBA",
            VerdictCode::EAA => "EAA",
            VerdictCode::ELF => "ELF",
            VerdictCode::EAF => "EAF",
            VerdictCode::EBW => "EBW",
            VerdictCode::EBDW => "EBDW",
            VerdictCode::MDL => "MDL",
            VerdictCode::CM => "CM",
        }
    }

    pub fn phase(self) -> Phase {
        match self {
            VerdictCode::EBA | VerdictCode::EAA => Phase::Forward,
            VerdictCode::EBW | VerdictCode::EBDW => Phase::Backward,
            VerdictCode::ELF | VerdictCode::EAF | VerdictCode::MDL => Phase::Metric,
            VerdictCode::CM => Phase::Terminal,
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            VerdictCode::EBA => "Error Before Activation",
            VerdictCode::EAA => "Error After Activation",
            VerdictCode::ELF => "Error in Loss Function",
            VerdictCode::EAF => "Error in Accuracy Function",
            VerdictCode::EBW => "Error Backward in Weight",
            VerdictCode::EBDW => "Error Backward in Delta Weight",
            VerdictCode::MDL => "Model Does not Learn",
            VerdictCode::CM => "Correct Model",
        }
    }
}

impl fmt::Display for VerdictCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Forward,
    Backward,
    Metric,
    Terminal,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Forward => "forward",
            Phase::Backward => "backward",
            Phase::Metric => "metric",
            Phase::Terminal => "terminal",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        match s {
            "forward" => Some(Phase::Forward),
            "backward" => Some(Phase::Backward),
            "metric" => Some(Phase::Metric),
            "terminal" => Some(Phase::Terminal),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome of a monitor: what went wrong, where, and when.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub code: VerdictCode,
    pub layer: Option<usize>,
    pub phase: Phase,
    pub epoch: Option<usize>,
    pub batch: Option<usize>,
    pub iteration: Option<usize>,
    pub elapsed_seconds: f64,
    pub message: String,
}

impl Verdict {
    /// A verdict raised while checking `snapshot`. `layer` must be given for
    /// the forward and backward codes and omitted otherwise.
    pub fn at(code: VerdictCode, layer: Option<usize>, snapshot: &BatchSnapshot, elapsed_seconds: f64, message: String) -> Self {
        debug_assert_eq!(
            layer.is_some(),
            matches!(code.phase(), Phase::Forward | Phase::Backward),
            "layer presence must follow the verdict phase"
        );
        Self {
            code,
            layer,
            phase: code.phase(),
            epoch: Some(snapshot.epoch),
            batch: Some(snapshot.batch),
            iteration: Some(snapshot.global_iteration),
            elapsed_seconds,
            message,
        }
    }

    /// The terminal verdict. `last` is the last batch observed, if any.
    pub fn correct_model(last: Option<(usize, usize, usize)>, elapsed_seconds: f64) -> Self {
        Self {
            code: VerdictCode::CM,
            layer: None,
            phase: Phase::Terminal,
            epoch: last.map(|l| l.0),
            batch: last.map(|l| l.1),
            iteration: last.map(|l| l.2),
            elapsed_seconds,
            message: "Correct Model: training completed with no fault detected".into(),
        }
    }

    pub fn is_fault(&self) -> bool {
        self.code != VerdictCode::CM
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code)?;
        if let Some(layer) = self.layer {
            write!(f, " layer {layer}")?;
        }
        write!(f, " ({})", self.phase)?;
        if let (Some(e), Some(b), Some(i)) = (self.epoch, self.batch, self.iteration) {
            write!(f, " at epoch {e}, batch {b}, iteration {i}")?;
        }
        write!(f, ": {}", self.message)
    }
}
