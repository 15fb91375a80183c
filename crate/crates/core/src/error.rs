use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic, expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: unsupported version {found}, expected {expected}")]
    Version {
        path: PathBuf,
        expected: u16,
        found: u16,
    },
    #[error("{path}: truncated while reading {what}")]
    Truncated { path: PathBuf, what: String },
    #[error("{path}: checksum mismatch in {record}")]
    Checksum { path: PathBuf, record: String },
    #[error("{path}: malformed {what}: {msg}")]
    Malformed {
        path: PathBuf,
        what: String,
        msg: String,
    },
    #[error("dimension mismatch: {0}")]
    Mismatch(String),
    #[error("missing {0}")]
    Missing(String),
    #[error("non-finite {term} at step {step}")]
    NonFinite { term: String, step: u64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "bad-magic",
            Error::Version { .. } => "version",
            Error::Truncated { .. } => "truncated",
            Error::Checksum { .. } => "checksum",
            Error::Malformed { .. } => "malformed",
            Error::Mismatch(_) => "mismatch",
            Error::Missing(_) => "missing",
            Error::NonFinite { .. } => "non-finite",
        }
    }
}
