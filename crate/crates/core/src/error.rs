use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("missing sender statistics for sender `{0}`")]
    MissingSender(String),

    #[error("{0}")]
    Numerical(String),

    #[error("principal-axis factoring did not converge after {iterations} iterations (last max communality change {last_delta:e})")]
    NotConverged {
        iterations: usize,
        last_delta: f64,
        /// Loadings of the last iterate, row-major p×m.
        last_loadings: Vec<Vec<f64>>,
    },

    #[error("slices {earlier} and {later} share {shared} tokens, need at least {required}")]
    InsufficientOverlap {
        earlier: usize,
        later: usize,
        shared: usize,
        required: usize,
    },

    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: String, source: Box<Error> },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}
