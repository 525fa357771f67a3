use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the forecasting pipeline.
///
/// Variants are grouped so that a front end can map them onto distinct exit
/// codes: configuration problems, bad input data, and training failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{file}:{line}: {message}")]
    Schema {
        file: String,
        line: u64,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical error in {stage}: {message}")]
    Numerical { stage: &'static str, message: String },

    #[error("training failed: {0}")]
    Training(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn numerical(stage: &'static str, msg: impl Into<String>) -> Self {
        Error::Numerical {
            stage,
            message: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
