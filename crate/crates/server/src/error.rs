use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use dissect_core::concepts::{ConceptError, ReportError};
use dissect_core::corpus::CorpusError;
use dissect_core::index::IndexError;
use dissect_core::mask::MaskError;
use dissect_core::model::InferenceError;
use dissect_core::query::QueryError;
use serde::{Deserialize, Serialize};

/// Machine-readable error class carried in every error body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    ValidationError,
    NotFound,
    Conflict,
    ReportUnavailable,
    InternalError,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::ValidationError => StatusCode::BAD_REQUEST,
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::Conflict => StatusCode::CONFLICT,
            ErrorCode::ReportUnavailable => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::InternalError => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Error body: `{"code": "...", "message": "..."}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code:?}: {message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::ValidationError, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NotFound, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::InternalError, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.code == ErrorCode::InternalError {
            tracing::error!(message = %self.message, "request failed");
        }
        (self.code.status(), Json(self)).into_response()
    }
}

impl From<MaskError> for ApiError {
    fn from(e: MaskError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::EmptyRegion
            | QueryError::ResolutionMismatch { .. }
            | QueryError::InvalidThreshold(_)
            | QueryError::Mask(_) => Self::validation(e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}

impl From<ConceptError> for ApiError {
    fn from(e: ConceptError) -> Self {
        match e {
            ConceptError::EmptyName
            | ConceptError::InvalidName(_)
            | ConceptError::UnknownNeuron(_)
            | ConceptError::EmptySelection => Self::validation(e.to_string()),
            ConceptError::Duplicate(_) => Self::new(ErrorCode::Conflict, e.to_string()),
            ConceptError::UnknownConcept(_) => Self::not_found(e.to_string()),
            ConceptError::Log { .. } | ConceptError::Io(_) => Self::internal(e.to_string()),
        }
    }
}

impl From<ReportError> for ApiError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Unavailable => Self::new(ErrorCode::ReportUnavailable, e.to_string()),
            ReportError::Query(q) => q.into(),
            ReportError::ForeignNeuron(_) => Self::internal(e.to_string()),
        }
    }
}

impl From<IndexError> for ApiError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::UnknownNeuron(_) => Self::not_found(e.to_string()),
            IndexError::InvalidK => Self::validation(e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}

impl From<InferenceError> for ApiError {
    fn from(e: InferenceError) -> Self {
        Self::internal(e.to_string())
    }
}

impl From<CorpusError> for ApiError {
    fn from(e: CorpusError) -> Self {
        Self::internal(e.to_string())
    }
}
