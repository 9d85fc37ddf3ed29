use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use veriflow_core::audit_log::AuditError;
use veriflow_core::bus::BusError;
use veriflow_core::policy_trust::{PolicyError, ReviewStatus};
use veriflow_core::simulator::SimError;

/// Stable error codes shared by the CLI and the HTTP API.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NotFound,
    Conflict,
    Invalid,
    Expired,
    Internal,
}

impl ErrorCode {
    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::NotFound => 404,
            ErrorCode::Conflict => 409,
            ErrorCode::Invalid => 400,
            ErrorCode::Expired => 410,
            ErrorCode::Internal => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    pub request_id: String,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
    #[error("data directory {0} is locked by another process")]
    Locked(PathBuf),
    #[error("audit log and state file disagree in {0}; restore one from backup")]
    Inconsistent(PathBuf),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("{0}")]
    Domain(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    pub fn code(&self) -> ErrorCode {
        match self {
            ServiceError::NotFound(_) => ErrorCode::NotFound,
            ServiceError::Invalid(_) | ServiceError::Domain(_) => ErrorCode::Invalid,
            ServiceError::Policy(p) => match p {
                PolicyError::NotFound(_) => ErrorCode::NotFound,
                PolicyError::Expired { .. } => ErrorCode::Expired,
                PolicyError::Conflict { status, .. } if *status == ReviewStatus::ExpiredAutoRejected => {
                    ErrorCode::Expired
                }
                PolicyError::Conflict { .. }
                | PolicyError::DuplicateDecision(_)
                | PolicyError::DuplicateReview(_)
                | PolicyError::AlreadyRolledBack(_) => ErrorCode::Conflict,
                PolicyError::SnapshotMismatch | PolicyError::Audit(_) => ErrorCode::Internal,
                _ => ErrorCode::Invalid,
            },
            ServiceError::Sim(s) => match s {
                SimError::Io(_) | SimError::Audit(_) => ErrorCode::Internal,
                _ => ErrorCode::Invalid,
            },
            ServiceError::Locked(_) => ErrorCode::Conflict,
            ServiceError::Inconsistent(_) | ServiceError::Audit(_) | ServiceError::Bus(_) | ServiceError::Io(_) => {
                ErrorCode::Internal
            }
        }
    }

    pub fn to_api(&self, request_id: &str) -> ApiError {
        ApiError {
            code: self.code(),
            message: self.to_string(),
            request_id: request_id.to_string(),
        }
    }
}
