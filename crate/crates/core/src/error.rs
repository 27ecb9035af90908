//! Error type shared by all modules of the crate.

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or parameter dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A training loop produced a non-finite loss or gradient.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// The requested mode cannot handle the given problem size.
    #[error("capability exceeded: {0}")]
    Capability(String),

    /// A task subset maps to no samples on one side.
    #[error("empty task class: {0}")]
    EmptyClass(String),

    /// File could not be read or written.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed text input, with the 1-based line where parsing failed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl Error {
    pub fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
