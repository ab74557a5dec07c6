use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {op} (element {index})")]
    NonFinite { op: &'static str, index: usize },

    /// A precondition of an API call was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A finite-difference evaluation hit an error at a specific element.
    #[error("gradient check failed at input {input}, element {element}: {source}")]
    GradCheck { input: usize, element: usize, source: Box<Error> },

    /// Training hit a non-finite value. `diagnostic` is the last finite
    /// loss breakdown as JSON.
    #[error("training aborted at step {step}: {reason}")]
    Aborted { step: usize, reason: String, diagnostic: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
