//! Synthetic task generation, evaluation, and experiment orchestration.

pub mod eval;
pub mod matrix;
pub mod stats;
pub mod task;

pub use eval::{evaluate, EvalResult};
pub use matrix::{config_hash, run_matrix, ExperimentConfig, MatrixOutput, ResultRow};
pub use task::{Sample, SyntheticTask, TaskConfig};
