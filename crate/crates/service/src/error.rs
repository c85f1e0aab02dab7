use std::path::PathBuf;

use medirelay_core::store::StoreError;
use medirelay_core::sync::SyncError;
use medirelay_core::workflow::WorkflowError;
use thiserror::Error;

use crate::eventlog::LogError;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("data directory {0} is in use by another process")]
    DataDirLocked(PathBuf),
    #[error("cannot listen on {0}")]
    PortUnavailable(String),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Log(#[from] LogError),
    /// Storage failed; the command was not applied.
    #[error("service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error("bad credentials")]
    BadCredentials,
    #[error("account is not active")]
    NotActive,
    #[error("missing, unknown or expired session")]
    Unauthenticated,
    #[error("not permitted: {0}")]
    Forbidden(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("bad request: {0}")]
    BadRequest(String),
}

impl ServiceError {
    /// Stable machine-readable name used in API error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Self::ConfigInvalid(_) => "ConfigInvalid",
            Self::DataDirLocked(_) => "DataDirLocked",
            Self::PortUnavailable(_) => "PortUnavailable",
            Self::Workflow(e) => e.code(),
            Self::Store(StoreError::NotFound(_)) => "NotFound",
            Self::Store(e) if e.is_corrupt_payload() => "CorruptPayload",
            Self::Store(StoreError::ChecksumMismatch(_)) => "ChecksumMismatch",
            Self::Store(_) => "StoreError",
            Self::Sync(_) => "SyncError",
            Self::Log(_) => "LogError",
            Self::ServiceUnavailable(_) => "ServiceUnavailable",
            Self::BadCredentials => "BadCredentials",
            Self::NotActive => "NotActive",
            Self::Unauthenticated => "Unauthenticated",
            Self::Forbidden(_) => "Forbidden",
            Self::NotFound(_) => "NotFound",
            Self::BadRequest(_) => "BadRequest",
        }
    }
}
