//! Crate-wide error type with enough context to point at the offending
//! file, byte, or record.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Failed to read an input file.
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },

    /// Failed to write an output file.
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },

    /// Binary format violation, located by byte offset.
    #[error("{path}: byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    /// Text record violation, located by 1-based line number.
    #[error("{path}: line {line}: {msg}")]
    Record {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Bad configuration value or combination.
    #[error("invalid config: {0}")]
    Config(String),

    /// Precondition or invariant violation on in-memory data.
    #[error("{0}")]
    Invalid(String),

    /// A state that should be unreachable given validated inputs.
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code: 1 for bad input, 2 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Read { .. }
            | Error::Format { .. }
            | Error::Record { .. }
            | Error::Config(_)
            | Error::Invalid(_) => 1,
            Error::Write { .. } | Error::Internal(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
