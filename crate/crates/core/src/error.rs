use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Missing or malformed columns/fields in an input file.
    #[error("schema error: {0}")]
    Schema(String),

    /// Rows that cannot be assembled into well-formed trajectories.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A value outside its admissible domain (e.g. an action index out of range).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Singular or badly conditioned linear system.
    #[error("ill-posed system for {what}: {detail}")]
    IllPosed { what: String, detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than configuration or numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::Integrity(_)
                | Error::Domain(_)
                | Error::Dimension { .. }
                | Error::Io { .. }
                | Error::Csv(_)
                | Error::Json(_)
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::IllPosed { .. } | Error::Numerical(_))
    }
}
