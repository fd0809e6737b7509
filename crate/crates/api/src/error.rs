use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use seastar_core::metric::{RegisterError, SubscribeError};
use seastar_core::model::ModelError;
use serde_json::json;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ApiError {
    #[error("unknown resource type `{0}`")]
    BadType(String),
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("`{0}` has no parent")]
    NoParent(String),
    #[error("identity headers missing or malformed: {0}")]
    NoIdentity(String),
    #[error("no alive {kind} matches the caller identity")]
    IdentityUnknown { kind: String },
    #[error("parse error at {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("{0}")]
    BadRequest(String),
    #[error("derived metric `{0}` already exists")]
    DuplicateName(String),
    #[error("upstream unavailable: {0}")]
    UpstreamUnavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadType(_) | ApiError::Parse { .. } | ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::UnknownEntity(_) | ApiError::NoParent(_) | ApiError::IdentityUnknown { .. } => {
                StatusCode::NOT_FOUND
            }
            ApiError::NoIdentity(_) => StatusCode::UNAUTHORIZED,
            ApiError::DuplicateName(_) => StatusCode::CONFLICT,
            ApiError::UpstreamUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ApiError::BadType(_) => "BadType",
            ApiError::UnknownEntity(_) => "UnknownEntity",
            ApiError::NoParent(_) => "NoParent",
            ApiError::NoIdentity(_) => "NoIdentity",
            ApiError::IdentityUnknown { .. } => "IdentityUnknown",
            ApiError::Parse { .. } => "ParseError",
            ApiError::BadRequest(_) => "BadRequest",
            ApiError::DuplicateName(_) => "DuplicateName",
            ApiError::UpstreamUnavailable(_) => "UpstreamUnavailable",
            ApiError::Internal(_) => "Internal",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.code(), "message": self.to_string() });
        if let ApiError::Parse { position, .. } = &self {
            body["position"] = json!(position);
        }
        (self.status(), Json(body)).into_response()
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::UnknownEntity(id) => ApiError::UnknownEntity(id),
            // Not alive at the requested instant reads as absent.
            ModelError::NotAliveAt { id, .. } => ApiError::UnknownEntity(id),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<RegisterError> for ApiError {
    fn from(e: RegisterError) -> Self {
        match e {
            RegisterError::DuplicateName(name) => ApiError::DuplicateName(name),
            RegisterError::Parse(p) => ApiError::Parse {
                position: p.column,
                message: p.message,
            },
            other => ApiError::BadRequest(other.to_string()),
        }
    }
}

impl From<SubscribeError> for ApiError {
    fn from(e: SubscribeError) -> Self {
        ApiError::BadRequest(e.to_string())
    }
}
