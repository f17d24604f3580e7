use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time series must be non-empty and finite")]
    InvalidSeries,

    #[error("integration diverged at step {step}")]
    IntegrationDiverged { step: usize },

    #[error("series has a degenerate range (all values equal)")]
    DegenerateRange,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("no dimension with false-neighbor fraction <= {threshold}")]
    DimensionNotFound { threshold: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty Jacobian sequence")]
    EmptyJacobians,

    #[error("non-finite action encountered")]
    NonFiniteAction,

    #[error("malformed series file {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
