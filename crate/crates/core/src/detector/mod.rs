//! Fault detection and localization over batch snapshots, plus the
//! loss/accuracy-only baseline callbacks.

mod ana;
mod baselines;
mod localize;
mod verdict;

pub use ana::{AnaLimits, AnaState, KeyStats};
pub use baselines::{EarlyStopping, Monitored, TerminateOnNaN};
pub use localize::{slope, DeltaSource, Detector, DetectorConfig};
pub use verdict::{Phase, Verdict, VerdictCode};
