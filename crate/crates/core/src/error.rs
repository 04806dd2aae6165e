use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("bad dataset entry {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 I/O or file format, 4 missing
    /// artifact, 5 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Io { .. } | Error::Image { .. } | Error::Dataset { .. } | Error::Format(_) => 3,
            Error::MissingArtifact(_) => 4,
            Error::Numeric(_) | Error::UndefinedMetric(_) | Error::Tensor(_) => 5,
        }
    }
}
