use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or inconsistent input data, with file and (1-based) row context when known.
    #[error("{}{}: {message}", path.display(), row.map(|r| format!(" (row {r})")).unwrap_or_default())]
    Data {
        path: PathBuf,
        row: Option<usize>,
        message: String,
    },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    /// A sequential label longer than the series admits no monotone alignment.
    #[error("no feasible alignment: label length {labels} exceeds series length {length}")]
    Infeasible { labels: usize, length: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("empty {0} split")]
    EmptySplit(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, row: Option<usize>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            row,
            message: message.into(),
        }
    }
}
