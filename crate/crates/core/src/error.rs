use std::path::PathBuf;

use thiserror::Error;

use crate::aggregate::AggregateError;
use crate::calibrate::CalibrateError;
use crate::model::{GoldError, SpanError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{context}: {source}")]
    Span {
        context: String,
        #[source]
        source: SpanError,
    },
    #[error("{context}: {source}")]
    Gold {
        context: String,
        #[source]
        source: GoldError,
    },
    #[error("example {example_id}, model {model_id}: {source}")]
    Aggregate {
        example_id: String,
        model_id: String,
        #[source]
        source: AggregateError,
    },
    #[error(transparent)]
    Calibrate(#[from] CalibrateError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data validation failed: {0}")]
    Validation(String),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 1,
            Error::Calibrate(e) if e.is_numeric() => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
