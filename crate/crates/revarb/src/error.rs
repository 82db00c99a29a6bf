//! Error type shared by the whole crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Structural problem: shapes or index ranges do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Cholesky factorization failed even after jitter escalation.
    /// `jitter` is the last absolute diagonal boost that was tried.
    #[error("cholesky failed for {matrix} (final jitter {jitter:.3e})")]
    Cholesky { matrix: String, jitter: f64 },

    /// All optimizer restarts failed.
    #[error("training failed: {0}")]
    Training(String),

    /// Dataset-level problem (lengths, degenerate channels, divergence).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed input file. `line` is 1-indexed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
