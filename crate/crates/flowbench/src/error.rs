//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. The CLI maps error kinds to
//! exit codes: configuration and usage problems exit 2, runtime and I/O
//! failures exit 1.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation that divides by the interpolation time was called at or
    /// below the configured floor.
    #[error("degenerate interpolation time t = {t}")]
    DegenerateTime { t: f64 },

    /// A numeric computation produced a non-finite value.
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    /// A data or candidate file failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The resolved configuration is unusable.
    #[error("configuration error: {0}")]
    Config(String),

    /// An internal invariant was violated; this is a bug.
    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
