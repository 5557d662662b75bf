//! Crate-wide error type.
//!
//! Fallible operations return [`Result`]; variants carry enough context to
//! pinpoint the offending input (file row, tensor shape, parameter name)
//! without holding references into caller data.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A source file could not be read or written.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A record in a CSV source failed to parse.
    #[error("parse error at {path}:{row}: {message}")]
    Parse {
        path: String,
        row: usize,
        message: String,
    },

    /// Inputs are individually well-formed but mutually inconsistent
    /// (unknown node ids, duplicate cells, irregular timestamp grid, ...).
    #[error("inconsistent input: {0}")]
    Inconsistent(String),

    /// Geometry or statistics degenerate to the point where an operation is
    /// undefined (co-located stations, zero-variance feature, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A configuration value is outside its admissible range.
    #[error("invalid parameter {name}: {message}")]
    Parameter { name: String, message: String },

    /// Tensor arguments do not have the shapes an operation requires.
    #[error("shape mismatch in {op}: {message}")]
    Shape { op: String, message: String },

    /// A numeric invariant failed at runtime (non-finite loss, singular
    /// normalization, empty label set, ...).
    #[error("numeric failure in {context}: {message}")]
    Numeric { context: String, message: String },

    /// A stored checkpoint could not be decoded or does not match the
    /// requesting configuration.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parameter(name: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parameter {
            name: name.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(op: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            message: message.into(),
        }
    }

    pub(crate) fn numeric(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
