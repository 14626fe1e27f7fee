use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use simhub_core::api::ErrorBody;
use simhub_core::{FormatError, IllegalTransition};

/// Error returned by an API call, rendered as `{error, detail}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub detail: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status,
            code,
            detail: detail.into(),
        }
    }

    pub fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", detail)
    }

    pub fn unknown_experiment(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "UnknownExperiment", format!("no experiment `{id}`"))
    }

    pub fn internal(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", detail)
    }
}

impl From<IllegalTransition> for ApiError {
    fn from(e: IllegalTransition) -> Self {
        Self::new(StatusCode::CONFLICT, "IllegalTransition", e.to_string())
    }
}

impl From<FormatError> for ApiError {
    fn from(e: FormatError) -> Self {
        let (status, code) = match &e {
            FormatError::Json(_) | FormatError::Schema { .. } => (StatusCode::BAD_REQUEST, "InvalidSysCfg"),
            FormatError::UnknownParameter(_) => (StatusCode::UNPROCESSABLE_ENTITY, "UnknownParameter"),
            FormatError::TypeMismatch { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "TypeMismatch"),
            FormatError::SystemMismatch { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "SystemMismatch"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        Self::internal(format!("storage: {e}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code.to_string(),
            detail: self.detail,
        };
        (self.status, Json(body)).into_response()
    }
}
