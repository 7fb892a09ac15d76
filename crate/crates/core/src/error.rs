use thiserror::Error;

use crate::backends::BackendError;
use crate::codec::CodecError;
use crate::env::EnvError;
use crate::metrics::MetricsError;
use crate::store::StoreError;
use crate::tsr::DomainError;

/// Coarse error class, used for process exit codes and error JSON.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Backend,
    Environment,
    Internal,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Validation => 2,
            ErrorKind::Backend => 3,
            ErrorKind::Environment => 4,
            ErrorKind::Internal => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Validation => "validation",
            ErrorKind::Backend => "backend",
            ErrorKind::Environment => "environment",
            ErrorKind::Internal => "internal",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Internal(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Codec(_) | Error::Metrics(_) | Error::Domain(_) | Error::Config(_) => ErrorKind::Validation,
            Error::Backend(BackendError::Template(_)) | Error::Backend(BackendError::Config(_)) => {
                ErrorKind::Validation
            }
            Error::Backend(_) => ErrorKind::Backend,
            Error::Env(_) => ErrorKind::Environment,
            Error::Store(StoreError::Io { .. }) => ErrorKind::Internal,
            Error::Store(_) => ErrorKind::Validation,
            Error::Internal(_) => ErrorKind::Internal,
        }
    }
}
