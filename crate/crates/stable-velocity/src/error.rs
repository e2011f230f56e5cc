//! Crate-wide error type.

use thiserror::Error;

/// Unified error type for the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A schedule was constructed or queried outside its valid domain.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// A mixture specification failed validation.
    #[error("invalid mixture spec: {0}")]
    Spec(String),

    /// Mismatched dimensions between arguments.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A solver plan or step was requested with invalid parameters.
    #[error("solver error: {0}")]
    Solver(String),

    /// Training or evaluation produced a non-finite value.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    /// A configuration file or flag set was inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset or checkpoint file violated its format contract.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Convenience constructor for format violations.
    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
