//! Error type shared by all modules.

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A scenario tree or ensemble would exceed its budget.
    #[error("capacity exceeded: {what} needs {required}, budget is {budget}")]
    Capacity {
        what: String,
        required: String,
        budget: String,
    },
    #[error("insufficient moments: {0}")]
    InsufficientMoments(String),
    /// Picard iteration failed to contract or produced non-finite values.
    #[error("solver diagnostic: {0}")]
    Diagnostic(String),
    /// A materialized data set failed an assumption check.
    #[error("validation failed for {assumption}: {witness}")]
    Validation { assumption: String, witness: String },
    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
