use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller handed in a value outside the operation's domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{what}: requested range [{lo}, {hi}] not covered by table range [{table_lo}, {table_hi}]")]
    Range {
        what: String,
        lo: f64,
        hi: f64,
        table_lo: f64,
        table_hi: f64,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Artifacts on disk disagree with each other (sidecar vs config, checkpoint vs architecture).
    #[error("data mismatch: {0}")]
    Mismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Json(_) | Error::Range { .. } => 2,
            Error::InvalidInput(_) => 2,
            Error::Mismatch(_) | Error::Shape(_) | Error::StaleCache(_) => 3,
            Error::Numerical(_) => 4,
            Error::Io { .. } | Error::Image(_) => 1,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
