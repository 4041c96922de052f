use thiserror::Error;

use crate::tensor::Shape4;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("invalid shape {0:?}: every dimension must be >= 1")]
    InvalidShape([usize; 4]),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("network has no GCT layers")]
    NoGctLayers,
    #[error("data format error: {0}")]
    Format(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn shape4(op: &'static str, expected: Shape4, got: Shape4) -> Self {
        Self::shape(op, expected, got)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
