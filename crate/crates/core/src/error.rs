//! Error type shared by every module in the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad configuration value (invalid resolution, fraction outside [0,1], ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Shape mismatch between tensors, images or models.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A dataset entry could not be ingested; always names the offending path.
    #[error("ingestion error for {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    /// Incomplete or inconsistent metadata (missing provenance, class imbalance, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Too few samples for the requested statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Covariance spectrum fell outside the tolerated range.
    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    /// Training aborted (non-finite loss or similar), with diagnostics.
    #[error("training aborted: {0}")]
    Training(String),

    /// Checkpoint container is malformed or from an incompatible version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Registry bookkeeping failure (lock held, missing entry, ...).
    #[error("registry error: {0}")]
    Registry(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn ingestion(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Ingestion { path: path.into(), reason: reason.into() }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
