//! A small from-scratch neural network library with a training-time fault
//! detector that names the faulty layer and phase.
//!
//! The pieces, bottom-up: [`tensor`] and [`rng`]; [`layers`] and
//! [`objectives`]; [`engine`] (model, training loop) with [`probes`]
//! capturing per-batch snapshots; [`detector`] consuming them; and
//! [`workbench`] for specs, datasets, mutations, and benchmarking.

pub mod detector;
pub mod engine;
pub mod error;
pub mod layers;
pub mod objectives;
pub mod probes;
pub mod rng;
pub mod tensor;
pub mod workbench;

pub use detector::{Detector, DetectorConfig, Phase, Verdict, VerdictCode};
pub use engine::{fit, Model, TrainConfig, TrainOutcome};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
