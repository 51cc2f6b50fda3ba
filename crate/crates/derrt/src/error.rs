use std::io;

use thiserror::Error;

/// Crate-wide error type for recoverable failures.
///
/// Contract violations (dimension mismatches in hot math paths, backward on a
/// non-scalar) panic instead; everything data- or IO-dependent shows up here.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("environment error: {0}")]
    Environment(String),

    #[error("model format error: {0}")]
    ModelFormat(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
