use std::path::PathBuf;

/// Errors surfaced by fallible operations: configuration, file I/O,
/// checkpoint loading, and numeric failures detected at runtime.
///
/// Shape and argument misuse inside the tensor kernels panics instead;
/// those are programming errors, not recoverable conditions.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Config {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path} (byte {offset}): {msg}")]
    Parse {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint mismatch: missing {missing:?}, unexpected {unexpected:?}")]
    CheckpointMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
