//! User-facing surface: model specs, datasets, mutations, and the benchmark.

pub mod bench;
pub mod dataset;
pub mod monitor;
pub mod mutate;
pub mod spec;

pub use bench::{builtin_model, run_bench, score, BenchReport, BenchRow, Case, ModelRef, MonitorSummary, Suite};
pub use dataset::{builtin, load_csv, load_dataset, Dataset, LoadOptions, NormalizeMethod, Normalization};
pub use monitor::{train_spec, train_spec_with, MonitorKind, TrainReport};
pub use mutate::{mutate, GroundTruth, Mutation};
pub use spec::{parameter_fingerprint, CompileSpec, FitSpec, LayerSpec, ModelSpec, OptimizerSpec};
