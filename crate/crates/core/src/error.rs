use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("attention query row {0} has no attendable key")]
    EmptyAttentionRow(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward: {0}")]
    Backward(&'static str),

    #[error("gradient check: {0}")]
    GradCheck(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// True for failures caused by numerics (NaN/Inf, failed gradient checks).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::GradCheck(_))
    }
}
