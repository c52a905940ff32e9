//! Mapping from module errors to HTTP responses.
//!
//! Every error body is `{"code": "...", "message": "..."}`.
//!
//! | code                     | status |
//! |--------------------------|--------|
//! | `InvalidJson`            | 400    |
//! | `InvalidRequest`         | 400    |
//! | `Unauthorized`           | 401    |
//! | `NotFound`               | 404    |
//! | `UnknownRun`             | 404    |
//! | `UnknownAdvertiser`      | 404    |
//! | `UnknownCategory`        | 404    |
//! | `NoVerdict`              | 404    |
//! | `MethodNotAllowed`       | 405    |
//! | `HoldoutViolation`       | 409    |
//! | `RevisionGap`            | 409    |
//! | `DuplicateCategory`      | 409    |
//! | `DuplicateConflict`      | 409    |
//! | `WriterBusy`             | 409    |
//! | `UnsupportedMediaType`   | 415    |
//! | `StoreCorrupt`           | 500    |
//! | `StoreIo`                | 500    |
//! | `EvalError`              | 500    |
//! | `Internal`               | 500    |
//! | `StoreUnavailable`       | 503    |

use acu_core::eval::EvalError;
use acu_core::pipeline::{PipelineError, StageError};
use acu_core::store::StoreError;
use acu_core::triage::TriageError;
use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "InvalidRequest", message)
    }

    pub fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let message = e.to_string();
        let (status, code) = match e {
            StoreError::UnknownRun(_) => (StatusCode::NOT_FOUND, "UnknownRun"),
            StoreError::Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "StoreUnavailable"),
            StoreError::Corrupt { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "StoreCorrupt"),
            StoreError::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "StoreIo"),
            StoreError::DuplicateConflict { .. } => (StatusCode::CONFLICT, "DuplicateConflict"),
            StoreError::WriterBusy(_) => (StatusCode::CONFLICT, "WriterBusy"),
            StoreError::NotACandidate { .. } => (StatusCode::NOT_FOUND, "UnknownAdvertiser"),
            StoreError::RunNotRunning { .. } | StoreError::IncompleteRun { .. } | StoreError::ManifestMismatch(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "Internal")
            }
        };
        Self::new(status, code, message)
    }
}

impl From<TriageError> for ApiError {
    fn from(e: TriageError) -> Self {
        let message = e.to_string();
        let (status, code) = match e {
            TriageError::Store(inner) => return inner.into(),
            TriageError::UnknownRun(_) => (StatusCode::NOT_FOUND, "UnknownRun"),
            TriageError::UnknownCategory(_) => (StatusCode::NOT_FOUND, "UnknownCategory"),
            TriageError::UnknownAdvertiser { .. } => (StatusCode::NOT_FOUND, "UnknownAdvertiser"),
            TriageError::HoldoutViolation { .. } => (StatusCode::CONFLICT, "HoldoutViolation"),
            TriageError::RevisionGap { .. } => (StatusCode::CONFLICT, "RevisionGap"),
            TriageError::DuplicateCategory(_) => (StatusCode::CONFLICT, "DuplicateCategory"),
            TriageError::Invalid(_) => (StatusCode::BAD_REQUEST, "InvalidRequest"),
        };
        Self::new(status, code, message)
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "EvalError", e.to_string())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e.source {
            StageError::Store(inner) => inner.into(),
            StageError::Eval(inner) => inner.into(),
            StageError::Triage(inner) => inner.into(),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", other.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        match r {
            JsonRejection::MissingJsonContentType(_) => Self::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                "UnsupportedMediaType",
                "request body must be sent with content-type application/json",
            ),
            other => Self::new(StatusCode::BAD_REQUEST, "InvalidJson", other.body_text()),
        }
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::invalid(r.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(r: PathRejection) -> Self {
        Self::invalid(r.body_text())
    }
}
