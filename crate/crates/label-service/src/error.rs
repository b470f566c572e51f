use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use vcnet_core::CoreError;

pub type Result<T> = std::result::Result<T, LabelError>;

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("{0}")]
    OutOfRange(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Wire form of every error: `{"code": ..., "message": ...}`.
#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl LabelError {
    pub fn code(&self) -> &'static str {
        match self {
            LabelError::OutOfRange(_) => "out_of_range",
            LabelError::BadRequest(_) => "bad_request",
            LabelError::NotFound(_) => "not_found",
            LabelError::Core(CoreError::Io { .. }) => "io",
            LabelError::Core(CoreError::Window(_)) => "out_of_range",
            LabelError::Core(CoreError::DimensionMismatch(_)) => "dimension_mismatch",
            LabelError::Core(CoreError::Config(_)) => "bad_request",
            LabelError::Core(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self.code() {
            "out_of_range" | "bad_request" | "dimension_mismatch" => StatusCode::BAD_REQUEST,
            "not_found" => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for LabelError {
    fn into_response(self) -> Response {
        let body = ErrorBody { code: self.code().into(), message: self.to_string() };
        (self.status(), Json(body)).into_response()
    }
}
