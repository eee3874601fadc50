//! Error type shared across the toolkit.
//!
//! Every error carries a [`ErrorCategory`] so the CLI can map failures to
//! stable exit codes and a single-line machine-parseable prefix.

use thiserror::Error;

/// Coarse failure category, mapped 1:1 onto CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Malformed input that could not be parsed (exit code 2).
    Parse,
    /// Input that parsed but violates the feature schema or a data
    /// invariant (exit code 3).
    Schema,
    /// Numerical failure: non-finite values, degenerate likelihoods,
    /// invalid parameter ranges (exit code 4).
    Numeric,
    /// Filesystem or serialization failure (exit code 5).
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Parse => 2,
            ErrorCategory::Schema => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Io => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Parse => "parse",
            ErrorCategory::Schema => "schema",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Io => "io",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("{0}")]
    Validation(String),

    #[error("{0}")]
    Schema(String),

    #[error("{0}")]
    Numeric(String),

    #[error("{0}")]
    Io(String),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Parse { .. } => ErrorCategory::Parse,
            Error::Validation(_) => ErrorCategory::Schema,
            Error::Schema(_) => ErrorCategory::Schema,
            Error::Numeric(_) => ErrorCategory::Numeric,
            Error::Io(_) => ErrorCategory::Io,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Error::Io(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse { line: e.line() as u64, message: e.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
