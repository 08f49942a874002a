use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] kelly_ou_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for numerical
    /// failures, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        use kelly_ou_core::Error as M;
        match self {
            Error::Config(_) => 2,
            Error::Model(
                M::SingularVolatility { .. }
                | M::NonFinite { .. }
                | M::NotPositiveSemidefinite { .. }
                | M::Asymmetric { .. },
            ) => 3,
            Error::Model(_) => 2,
            Error::Io { .. } | Error::Json(_) | Error::Csv(_) => 1,
        }
    }
}
