use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file (ragged rows, unparsable numbers).
    #[error("{}: row {row}: {message}", path.display())]
    Format { path: PathBuf, row: usize, message: String },

    /// Data that parsed but breaks an invariant (non-increasing grid, NaN value, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Model or fit configuration that cannot be honoured for the given data.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Evaluation outside the domain of a basis.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("model file error: {0}")]
    ModelFile(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, row: usize, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            row,
            message: message.into(),
        }
    }
}
