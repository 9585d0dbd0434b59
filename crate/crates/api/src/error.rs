//! Error payload `{code, message, detail}`.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use heritage_core::{ArkError, Error};
use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.to_owned(),
            message: message.into(),
            detail: Value::Null,
        }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn unauthenticated() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "UNAUTHENTICATED", "a valid bearer token is required")
    }

    pub fn forbidden(message: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, "FORBIDDEN", message)
    }

    pub fn unprocessable(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", message)
    }
}

pub fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::Validation(_) | Error::EmptyContribution => StatusCode::UNPROCESSABLE_ENTITY,
        Error::SiteCompleted(_)
        | Error::Conflict(_)
        | Error::RunAlreadyActive(_)
        | Error::DuplicateVerboseId(_)
        | Error::IllegalTransition { .. } => StatusCode::CONFLICT,
        Error::ContributorBanned(_) => StatusCode::FORBIDDEN,
        Error::NotFound { .. } => StatusCode::NOT_FOUND,
        Error::Ark(a) => match a {
            ArkError::Malformed(_) | ArkError::BadCheck { .. } => StatusCode::BAD_REQUEST,
            ArkError::Unknown(_) => StatusCode::NOT_FOUND,
            ArkError::AlreadyBound(_) => StatusCode::CONFLICT,
            ArkError::Exhausted(_) => StatusCode::SERVICE_UNAVAILABLE,
        },
        Error::Db(_) | Error::Serde(_) | Error::Io(_) | Error::Config(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = status_of(&e);
        if status.is_server_error() {
            tracing::error!(error = %e, "request failed");
        }
        Self::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"code": self.code, "message": self.message, "detail": self.detail});
        (self.status, Json(body)).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
