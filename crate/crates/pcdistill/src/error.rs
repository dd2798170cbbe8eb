//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),

    #[error("schedule: {0}")]
    Schedule(String),

    #[error("model: {0}")]
    Model(String),

    #[error("compression: {0}")]
    Compress(String),

    #[error("scalar lab: {0}")]
    Scalar(String),

    #[error("config: {0}")]
    Config(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("run diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
