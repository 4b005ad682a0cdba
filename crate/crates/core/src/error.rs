//! Crate-level error type with process exit-code mapping for the CLI.

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    /// Exit codes: 2 config/schema, 3 missing checkpoint, 4 byte budget
    /// exceeded, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingCheckpoint(_) => 3,
            Error::Tensor(TensorError::BudgetExceeded { .. }) => 4,
            _ => 1,
        }
    }

    /// Short machine-parsable kind token for stderr reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(TensorError::BudgetExceeded { .. }) => "byte-budget",
            Error::Tensor(_) => "tensor",
            Error::InvalidInput(_) => "invalid-input",
            Error::Config(_) => "config",
            Error::MissingCheckpoint(_) => "missing-checkpoint",
            Error::Checkpoint(_) => "checkpoint",
            Error::Dataset(_) => "dataset",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
