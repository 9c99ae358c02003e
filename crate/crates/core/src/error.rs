use std::path::PathBuf;

use numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated a documented precondition.
    #[error("usage error: {0}")]
    Usage(String),
    /// A computation produced a non-finite or otherwise invalid number.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config digest mismatch: field `{field}` differs (checkpoint `{stored}`, config `{requested}`)")]
    Digest {
        field: String,
        stored: String,
        requested: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by how the program was invoked.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Parse { .. })
    }
}

impl From<NumericsError> for Error {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::Usage(m) => Error::Usage(m),
            NumericsError::Numeric(m) => Error::Numeric(m),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
