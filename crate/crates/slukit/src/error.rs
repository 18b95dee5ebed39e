//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]. The CLI maps variants to
//! process exit codes: configuration and usage problems exit 1, data and
//! format problems exit 2.

use thiserror::Error;

/// Unified error for tensor, text, corpus, model and harness operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement. Names the operation and both shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An index (token id, row id, ...) out of range.
    #[error("index out of range in {op}: {index} >= {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    /// Numeric contract violated (NaN input, non-finite value, ...).
    #[error("numeric error in {op}: {msg}")]
    Numeric { op: &'static str, msg: String },

    /// An API precondition violated by the caller.
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed file content (bad magic, truncation, version mismatch).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
