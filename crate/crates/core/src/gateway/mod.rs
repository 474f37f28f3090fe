//! The user-facing surface: the platform service, its REST routes under
//! `/api/v1`, and an HTTP client for them.

mod client;
mod config;
mod platform;
mod rest;

use std::collections::BTreeMap;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use crate::artifacts::ArtifactError;
use crate::convert::ConvertError;
use crate::eval::EvalError;
use crate::ir::IrError;
use crate::scheduler::SchedulerError;
use crate::store::StoreError;

pub use client::ApiClient;
pub use config::{ConfigError, PlatformConfig, ProviderKind, ENV_PREFIX};
pub use platform::{
    AddUtteranceRequest, CellPage, DatasetSummary, DatasetView, EditRequest, Health, ImportRequest, ImportResponse, ModelSummary,
    Platform, ReportView, SubmitJobRequest, Ticker, ValidationResult, DEFAULT_PAGE,
};
pub use rest::{router, Gateway};

/// Machine-readable error codes carried by every error response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    InvalidRequest,
    NotFound,
    VersionConflict,
    ValidationFailed,
    IllegalState,
    CapacityExhausted,
    ProviderError,
    StoreError,
    StoreUnwritable,
    BadConfig,
    Unavailable,
    Internal,
}

impl ErrorCode {
    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::InvalidRequest | ErrorCode::BadConfig => 400,
            ErrorCode::NotFound => 404,
            ErrorCode::VersionConflict | ErrorCode::IllegalState => 409,
            ErrorCode::ValidationFailed => 422,
            ErrorCode::ProviderError => 502,
            ErrorCode::CapacityExhausted | ErrorCode::Unavailable => 503,
            ErrorCode::StoreError | ErrorCode::StoreUnwritable | ErrorCode::Internal => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{code:?}: {message}")]
pub struct ApiError {
    pub http_status: u16,
    pub code: ErrorCode,
    pub message: String,
    #[serde(default)]
    pub details: Option<BTreeMap<String, serde_json::Value>>,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            http_status: code.http_status(),
            code,
            message: message.into(),
            details: None,
        }
    }

    pub fn with_detail(mut self, key: &str, value: impl Serialize) -> Self {
        self.details
            .get_or_insert_with(BTreeMap::new)
            .insert(key.to_string(), serde_json::to_value(value).expect("detail serializes"));
        self
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        ApiError::new(ErrorCode::InvalidRequest, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(ErrorCode::NotFound, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let code = match &e {
            StoreError::NotFound(_) | StoreError::VersionNotFound { .. } => ErrorCode::NotFound,
            StoreError::InvalidKey(_) | StoreError::WrongNamespace(..) => ErrorCode::InvalidRequest,
            StoreError::Conflict { .. } => ErrorCode::VersionConflict,
            StoreError::CorruptIndex { .. } | StoreError::Io(_) => ErrorCode::StoreError,
        };
        let err = ApiError::new(code, e.to_string());
        match e {
            StoreError::Conflict { expected, actual, .. } => err.with_detail("expected", expected).with_detail("actual", actual),
            _ => err,
        }
    }
}

impl From<IrError> for ApiError {
    fn from(e: IrError) -> Self {
        match e {
            IrError::VersionConflict { expected, actual } => ApiError::new(ErrorCode::VersionConflict, e.to_string())
                .with_detail("expected", expected)
                .with_detail("actual", actual),
            IrError::Rejected(ref issues) => {
                let issues = issues.clone();
                ApiError::new(ErrorCode::ValidationFailed, e.to_string()).with_detail("issues", issues)
            }
            IrError::UnknownUtterance(_) => ApiError::not_found(e.to_string()),
            IrError::Io(_) => ApiError::new(ErrorCode::StoreError, e.to_string()),
            _ => ApiError::invalid(e.to_string()),
        }
    }
}

impl From<ArtifactError> for ApiError {
    fn from(e: ArtifactError) -> Self {
        match e {
            ArtifactError::Store(s) => s.into(),
            ArtifactError::Ir(i) => i.into(),
            ArtifactError::Eval(v) => v.into(),
            other => ApiError::new(ErrorCode::Internal, other.to_string()),
        }
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::UnknownLabel(_) => ApiError::not_found(e.to_string()),
            _ => ApiError::invalid(e.to_string()),
        }
    }
}

impl From<ConvertError> for ApiError {
    fn from(e: ConvertError) -> Self {
        ApiError::invalid(e.to_string())
    }
}

impl From<SchedulerError> for ApiError {
    fn from(e: SchedulerError) -> Self {
        let code = match &e {
            SchedulerError::InvalidSpec(_) | SchedulerError::InvalidPolicy(_) => ErrorCode::InvalidRequest,
            SchedulerError::DuplicateJob(_) | SchedulerError::IllegalTransition { .. } | SchedulerError::InstanceUnavailable(_) => {
                ErrorCode::IllegalState
            }
            SchedulerError::UnknownJob(_) | SchedulerError::UnknownInstance(_) => ErrorCode::NotFound,
            SchedulerError::CapacityExhausted(_) => ErrorCode::CapacityExhausted,
            SchedulerError::Provider(_) => ErrorCode::ProviderError,
        };
        ApiError::new(code, e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_body_shape() {
        let e = ApiError::from(IrError::VersionConflict { expected: 1, actual: 2 });
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v["http_status"], 409);
        assert_eq!(v["code"], "version_conflict");
        assert_eq!(v["details"]["actual"], 2);
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(keys, vec!["code", "details", "http_status", "message"]);
    }

    #[test]
    fn status_mapping() {
        assert_eq!(ApiError::from(StoreError::NotFound("x".into())).http_status, 404);
        assert_eq!(ApiError::from(SchedulerError::CapacityExhausted(2)).http_status, 503);
        assert_eq!(ApiError::from(EvalError::UnknownLabel("z".into())).code, ErrorCode::NotFound);
    }
}
