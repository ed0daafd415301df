use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),

    #[error("unknown session {0}")]
    UnknownSession(String),

    #[error("{0}")]
    TooLarge(String),

    #[error(transparent)]
    Internal(#[from] relit_core::Error),
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    id: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let (status, message) = match &self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m.clone()),
            ApiError::UnknownSession(_) => (StatusCode::NOT_FOUND, self.to_string()),
            ApiError::TooLarge(m) => (StatusCode::PAYLOAD_TOO_LARGE, m.clone()),
            // core input errors reaching here are caller mistakes
            ApiError::Internal(relit_core::Error::InvalidInput(m)) => (StatusCode::BAD_REQUEST, m.clone()),
            ApiError::Internal(e) => {
                log::error!("request {id} failed: {e}");
                (StatusCode::INTERNAL_SERVER_ERROR, "internal error".to_string())
            }
        };
        if status != StatusCode::INTERNAL_SERVER_ERROR {
            log::info!("request {id} rejected ({status}): {message}");
        }
        (status, Json(ErrorBody { error: message, id })).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
