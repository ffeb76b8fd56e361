use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("no class centroid could be estimated at tau = {tau}; lower the confidence threshold")]
    NoConfidentSamples { tau: f64 },

    #[error("centroid for class {0} is undefined")]
    UndefinedCentroid(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 2 usage/config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Numeric(_) | Error::NoConfidentSamples { .. } | Error::UndefinedCentroid(_) => 3,
            Error::Parse { .. } | Error::Checkpoint(_) | Error::Io { .. } | Error::Json(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
