use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A row whose values are all equal, so its correlation (or normalization) is undefined.
    #[error("{kind} row {row} is constant")]
    ConstantRow { row: usize, kind: RowKind },

    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which side of a (prediction, target) pair a degenerate row was found on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Prediction,
    Target,
}

impl std::fmt::Display for RowKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RowKind::Prediction => f.write_str("prediction"),
            RowKind::Target => f.write_str("target"),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
