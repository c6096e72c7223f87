//! End-to-end pipeline pieces shared by the CLI and the test suites.

pub mod commands;
mod config;
mod data;
mod model;
pub mod run;

pub use config::{EvalConfig, ExperimentConfig, TrainConfig, REFERENCE_MAX_DEPTH_CM, REFERENCE_THRESHOLD_CM};
pub use data::PairSet;
pub use model::{CheckpointMeta, FloodModel, Mode, Normalization, Trainer, TrainingPairs, CHECKPOINT_KIND};
pub use run::{SampledSet, SweepPoint, SweepReport};
