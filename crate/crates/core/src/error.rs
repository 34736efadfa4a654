use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, malformed world description, or bad arguments.
    #[error("configuration error: {0}")]
    Config(String),

    /// Operand shapes disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A text or binary file failed to parse. `line` is 1-based; 0 means the
    /// problem is not tied to a single line (binary files, truncation).
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("{operation} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        operation: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("diverged at step {step}: {message}")]
    Divergence { step: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(line: usize, message: impl Into<String>) -> Self {
        Error::Format {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }

    pub(crate) fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }
}
