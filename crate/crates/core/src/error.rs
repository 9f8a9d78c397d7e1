use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{path}: format error: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: dimension error: expected {expected} columns, found {found}")]
    Dimension {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: corrupted payload: {reason}")]
    Corruption { path: PathBuf, reason: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("optimization error: {0}")]
    Optimization(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics (as opposed to usage, configuration or I/O).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Evaluation(_) | Error::Optimization(_))
    }
}
