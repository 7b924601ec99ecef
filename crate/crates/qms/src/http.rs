//! Shared HTTP plumbing for the services: error responses, the internal
//! user header, and an injectable clock.

use std::sync::Arc;

use axum::extract::FromRequestParts;
use axum::http::request::Parts;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde_json::{json, Value};

use crate::store::StoreError;

/// Header carrying the verified user id from the gateway to the services.
pub const USER_HEADER: &str = "x-user-id";

#[derive(Debug)]
pub enum ApiError {
    BadRequest { code: &'static str, message: String, details: Option<Value> },
    Unauthorized,
    Forbidden(String),
    NotFound(String),
    Conflict { code: &'static str, message: String },
    PayloadTooLarge(usize),
    Unavailable(String),
    BadGateway(String),
    GatewayTimeout(String),
    Internal(String),
}

impl ApiError {
    pub fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        ApiError::BadRequest { code, message: message.into(), details: None }
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        ApiError::NotFound(what.into())
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest { .. } => StatusCode::BAD_REQUEST,
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::Forbidden(_) => StatusCode::FORBIDDEN,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict { .. } => StatusCode::CONFLICT,
            ApiError::PayloadTooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            ApiError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::BadGateway(_) => StatusCode::BAD_GATEWAY,
            ApiError::GatewayTimeout(_) => StatusCode::GATEWAY_TIMEOUT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        let body = match self {
            ApiError::BadRequest { code, message, details } => {
                let mut b = json!({"error": code, "message": message});
                if let Some(d) = details {
                    b["details"] = d;
                }
                b
            }
            ApiError::Unauthorized => json!({"error": "unauthorized", "message": "missing or invalid credentials"}),
            ApiError::Forbidden(m) => json!({"error": "forbidden", "message": m}),
            ApiError::NotFound(m) => json!({"error": "not-found", "message": m}),
            ApiError::Conflict { code, message } => json!({"error": code, "message": message}),
            ApiError::PayloadTooLarge(limit) => {
                json!({"error": "payload-too-large", "message": format!("request body exceeds {limit} bytes")})
            }
            ApiError::Unavailable(m) => json!({"error": "storage-unavailable", "message": m}),
            ApiError::BadGateway(m) => json!({"error": "upstream-unreachable", "message": m}),
            ApiError::GatewayTimeout(m) => json!({"error": "upstream-timeout", "message": m}),
            ApiError::Internal(m) => json!({"error": "internal", "message": m}),
        };
        (status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound => ApiError::NotFound("document not found".into()),
            other => ApiError::Unavailable(other.to_string()),
        }
    }
}

impl From<tokio::task::JoinError> for ApiError {
    fn from(e: tokio::task::JoinError) -> Self {
        ApiError::Internal(e.to_string())
    }
}

pub type ApiResult<T> = Result<T, ApiError>;

/// The user id the gateway attached to the request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserId(pub String);

#[axum::async_trait]
impl<S: Send + Sync> FromRequestParts<S> for UserId {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, _state: &S) -> Result<Self, Self::Rejection> {
        parts
            .headers
            .get(USER_HEADER)
            .and_then(|v| v.to_str().ok())
            .filter(|v| !v.is_empty())
            .map(|v| UserId(v.to_string()))
            .ok_or(ApiError::Unauthorized)
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Clock that only moves when told to.
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Arc<Self> {
        Arc::new(ManualClock(Mutex::new(start)))
    }

    pub fn advance(&self, by: chrono::Duration) {
        *self.0.lock() += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock()
    }
}

/// Deserializes a stored document body; a mismatch is an internal error.
pub fn from_value<T: serde::de::DeserializeOwned>(value: Value, what: &str) -> ApiResult<T> {
    serde_json::from_value(value).map_err(|e| ApiError::Internal(format!("stored {what} is malformed: {e}")))
}
