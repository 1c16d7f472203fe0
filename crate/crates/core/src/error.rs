use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Dims4;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Dims4,
        actual: Dims4,
    },

    #[error("channel mismatch in {op}: expected {expected}, got {actual}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: output dimensions would be non-positive")]
    InvalidOutputDims { op: &'static str },

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward already called on this graph")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got {0:?}")]
    NotScalar(Dims4),

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at iteration {iteration}; last good checkpoint: {}", last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFiniteLoss {
        iteration: u64,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
