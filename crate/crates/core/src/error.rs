use thiserror::Error;

/// Errors surfaced by tensor operations, model assembly and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on shape. Carries both shapes so the message
    /// names the offending dimensions.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation received a tensor whose shape violates its contract
    /// (wrong rank, odd width, non-scalar loss, ...).
    #[error("{op}: {msg} (got shape {shape:?})")]
    BadShape {
        op: &'static str,
        msg: String,
        shape: Vec<usize>,
    },

    /// A caller broke an API contract that is not a pure shape question
    /// (layer-count mismatch, stepping a finished episode, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
