use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    InvalidInput(String),

    #[error("{path}: sample_id '{sample_id}' {reason}")]
    Join {
        path: PathBuf,
        sample_id: String,
        reason: String,
    },

    #[error("{0}")]
    Consistency(String),

    #[error("{path}: row {row}, field '{field}': {reason}")]
    Validation {
        path: PathBuf,
        row: usize,
        field: String,
        reason: String,
    },

    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::Join { .. } => "JoinError",
            Error::Consistency(_) => "ConsistencyError",
            Error::Validation { .. } => "ValidationError",
            Error::Parse { .. } => "ParseError",
            Error::Io { .. } => "IoError",
        }
    }
}
