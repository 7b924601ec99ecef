//! Authentication service: accounts, sessions, and user-id propagation.
//!
//! Passwords are hashed with Argon2id under a per-account random salt; the
//! PHC-format hash string (which records the algorithm parameters) is the
//! only credential material stored. Session tokens are 256-bit random values
//! kept server-side as SHA-256 digests, so signing out revokes them.
//!
//! A new account's id is pushed to every downstream service's user
//! collection. Failed pushes are queued and retried; downstream writes are
//! idempotent, so repeating a push is harmless.

use std::sync::Arc;
use std::time::Duration;

use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::Argon2;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::http::{ApiError, ApiResult, Clock, SystemClock};
use crate::store::{filter, Filter, Store};

const USERS: &str = "users";
const SESSIONS: &str = "sessions";
const PENDING: &str = "pending_propagations";

pub const MIN_PASSWORD_LEN: usize = 8;

/// A service whose user collection mirrors account ids. Ids are pushed with
/// `POST <base_url>/<name>/internal/users`.
#[derive(Debug, Clone)]
pub struct Downstream {
    pub name: String,
    pub base_url: String,
}

#[derive(Clone)]
pub struct AuthConfig {
    pub token_ttl: chrono::Duration,
    pub downstream: Vec<Downstream>,
    pub request_timeout: Duration,
}

impl Default for AuthConfig {
    fn default() -> Self {
        AuthConfig { token_ttl: chrono::Duration::hours(24), downstream: Vec::new(), request_timeout: Duration::from_secs(5) }
    }
}

#[derive(Debug, Deserialize)]
pub struct SignupRequest {
    pub username: String,
    pub email: String,
    pub password: String,
}

#[derive(Debug, Deserialize)]
pub struct SigninRequest {
    pub email: String,
    pub password: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropagationState {
    Ok,
    Pending,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropagationStatus {
    pub service: String,
    pub status: PropagationState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignupResponse {
    pub user_id: String,
    pub propagation: Vec<PropagationStatus>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Session {
    pub token: String,
    pub user_id: String,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RetryReport {
    pub delivered: Vec<PropagationStatus>,
    pub still_pending: Vec<PropagationStatus>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredSession {
    token_sha256: String,
    user_id: String,
    expires_at: DateTime<Utc>,
}

pub struct AuthService {
    store: Store,
    clock: Arc<dyn Clock>,
    config: AuthConfig,
    http: reqwest::Client,
    /// Verified against when the email is unknown, so both failure paths
    /// cost one hash.
    decoy_hash: String,
}

fn hash_password(password: &str) -> Result<String, ApiError> {
    let mut salt = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut salt);
    let salt = SaltString::encode_b64(&salt).map_err(|e| ApiError::Internal(e.to_string()))?;
    Argon2::default()
        .hash_password(password.as_bytes(), &salt)
        .map(|h| h.to_string())
        .map_err(|e| ApiError::Internal(e.to_string()))
}

fn password_matches(password: &str, phc: &str) -> bool {
    PasswordHash::new(phc).is_ok_and(|parsed| Argon2::default().verify_password(password.as_bytes(), &parsed).is_ok())
}

fn token_digest(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

pub fn is_plausible_email(email: &str) -> bool {
    let Some((local, domain)) = email.split_once('@') else {
        return false;
    };
    !local.is_empty()
        && !domain.contains('@')
        && domain.split('.').count() >= 2
        && domain.split('.').all(|part| !part.is_empty())
        && !email.chars().any(char::is_whitespace)
}

impl AuthService {
    pub fn new(store: Store, config: AuthConfig) -> Result<Self, ApiError> {
        Self::with_clock(store, config, Arc::new(SystemClock))
    }

    pub fn with_clock(store: Store, config: AuthConfig, clock: Arc<dyn Clock>) -> Result<Self, ApiError> {
        let http =
            reqwest::Client::builder().timeout(config.request_timeout).build().map_err(|e| ApiError::Internal(e.to_string()))?;
        let decoy_hash = hash_password("decoy password never matches")?;
        Ok(AuthService { store, clock, config, http, decoy_hash })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub async fn signup(self: &Arc<Self>, req: SignupRequest) -> ApiResult<SignupResponse> {
        let username = req.username.trim().to_string();
        let email = req.email.trim().to_lowercase();
        if username.is_empty() {
            return Err(ApiError::bad_request("invalid-username", "username must not be empty"));
        }
        if !is_plausible_email(&email) {
            return Err(ApiError::bad_request("invalid-email", "email address is not valid"));
        }
        if req.password.chars().count() < MIN_PASSWORD_LEN {
            return Err(ApiError::bad_request(
                "weak-password",
                format!("password must have at least {MIN_PASSWORD_LEN} characters"),
            ));
        }
        let password = req.password;
        let password_hash = tokio::task::spawn_blocking(move || hash_password(&password)).await??;
        let now = self.clock.now();
        let (doc, created) = self.store.insert_unique(
            USERS,
            &filter([("email", email.as_str())]),
            json!({"username": username, "email": email, "password_hash": password_hash, "created_at": now}),
        )?;
        if !created {
            return Err(ApiError::Conflict { code: "duplicate-email", message: "an account with this email exists".into() });
        }
        let propagation = self.propagate(&doc.id).await;
        Ok(SignupResponse { user_id: doc.id, propagation })
    }

    pub async fn signin(&self, req: SigninRequest) -> ApiResult<Session> {
        let email = req.email.trim().to_lowercase();
        let account = self.store.query(USERS, &filter([("email", email.as_str())]))?.into_iter().next();
        let (user_id, phc) = match &account {
            Some(doc) => (Some(doc.id.clone()), doc.str_field("password_hash").unwrap_or_default().to_string()),
            None => (None, self.decoy_hash.clone()),
        };
        let password = req.password;
        let ok = tokio::task::spawn_blocking(move || password_matches(&password, &phc)).await?;
        let user_id = match (ok, user_id) {
            (true, Some(id)) => id,
            _ => return Err(ApiError::Unauthorized),
        };

        let mut raw = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut raw);
        let token = hex::encode(raw);
        let expires_at = self.clock.now() + self.config.token_ttl;
        let stored = StoredSession { token_sha256: token_digest(&token), user_id: user_id.clone(), expires_at };
        self.store.insert(SESSIONS, serde_json::to_value(stored).map_err(|e| ApiError::Internal(e.to_string()))?)?;
        Ok(Session { token, user_id, expires_at })
    }

    /// User owning a live token.
    pub fn verify(&self, token: &str) -> ApiResult<String> {
        let digest = token_digest(token);
        let doc = self.store.query(SESSIONS, &filter([("token_sha256", digest.as_str())]))?.into_iter().next();
        let session: StoredSession = match doc {
            Some(d) => serde_json::from_value(d.body).map_err(|e| ApiError::Internal(e.to_string()))?,
            None => return Err(ApiError::Unauthorized),
        };
        if self.clock.now() >= session.expires_at {
            return Err(ApiError::Unauthorized);
        }
        Ok(session.user_id)
    }

    pub fn signout(&self, token: &str) -> ApiResult<()> {
        let digest = token_digest(token);
        let docs = self.store.query(SESSIONS, &filter([("token_sha256", digest.as_str())]))?;
        if docs.is_empty() {
            return Err(ApiError::Unauthorized);
        }
        for d in docs {
            self.store.delete(SESSIONS, &d.id)?;
        }
        Ok(())
    }

    async fn push(&self, target: &Downstream, user_id: &str) -> Result<(), String> {
        let url = format!("{}/{}/internal/users", target.base_url.trim_end_matches('/'), target.name);
        let resp = self.http.post(&url).json(&json!({"user_id": user_id})).send().await.map_err(|e| e.to_string())?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(format!("{url} answered {}", resp.status()))
        }
    }

    /// Pushes `user_id` to every downstream service, queueing failures.
    pub async fn propagate(&self, user_id: &str) -> Vec<PropagationStatus> {
        let mut report = Vec::new();
        for target in &self.config.downstream {
            let status = match self.push(target, user_id).await {
                Ok(()) => PropagationStatus { service: target.name.clone(), status: PropagationState::Ok, error: None },
                Err(error) => {
                    let key = filter([("user_id", user_id), ("service", target.name.as_str())]);
                    let queued = self.store.insert_unique(
                        PENDING,
                        &key,
                        json!({"user_id": user_id, "service": target.name, "error": error}),
                    );
                    if let Err(e) = queued {
                        tracing::error!(%user_id, service = %target.name, "cannot queue propagation retry: {e}");
                    }
                    PropagationStatus { service: target.name.clone(), status: PropagationState::Pending, error: Some(error) }
                }
            };
            report.push(status);
        }
        report
    }

    /// Retries every queued propagation once.
    pub async fn retry_pending(&self) -> ApiResult<RetryReport> {
        let mut report = RetryReport::default();
        for doc in self.store.query(PENDING, &Filter::new())? {
            let user_id = doc.str_field("user_id").unwrap_or_default().to_string();
            let service = doc.str_field("service").unwrap_or_default().to_string();
            let Some(target) = self.config.downstream.iter().find(|d| d.name == service) else {
                continue;
            };
            match self.push(target, &user_id).await {
                Ok(()) => {
                    self.store.delete(PENDING, &doc.id)?;
                    report.delivered.push(PropagationStatus { service, status: PropagationState::Ok, error: None });
                }
                Err(error) => report.still_pending.push(PropagationStatus {
                    service,
                    status: PropagationState::Pending,
                    error: Some(error),
                }),
            }
        }
        Ok(report)
    }

    /// Ids of every account.
    pub fn user_ids(&self) -> ApiResult<Vec<String>> {
        Ok(self.store.query(USERS, &Filter::new())?.into_iter().map(|d| d.id).collect())
    }
}

/// Retries queued propagations every `interval` until the task is aborted.
pub fn spawn_retry_loop(service: Arc<AuthService>, interval: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut ticker = tokio::time::interval(interval);
        ticker.tick().await;
        loop {
            ticker.tick().await;
            if let Err(e) = service.retry_pending().await {
                tracing::warn!("propagation retry failed: {e:?}");
            }
        }
    })
}

pub fn bearer_token(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(axum::http::header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
        .filter(|t| !t.is_empty())
}

pub fn router(service: Arc<AuthService>) -> Router {
    Router::new()
        .route("/auth/signup", post(signup))
        .route("/auth/signin", post(signin))
        .route("/auth/signout", post(signout))
        .route("/auth/verify", get(verify))
        .route("/auth/internal/propagation/retry", post(retry))
        .with_state(service)
}

async fn signup(
    State(svc): State<Arc<AuthService>>,
    Json(req): Json<SignupRequest>,
) -> ApiResult<(StatusCode, Json<SignupResponse>)> {
    Ok((StatusCode::CREATED, Json(svc.signup(req).await?)))
}

async fn signin(State(svc): State<Arc<AuthService>>, Json(req): Json<SigninRequest>) -> ApiResult<Json<Session>> {
    Ok(Json(svc.signin(req).await?))
}

async fn signout(State(svc): State<Arc<AuthService>>, headers: HeaderMap) -> ApiResult<StatusCode> {
    let token = bearer_token(&headers).ok_or(ApiError::Unauthorized)?;
    svc.signout(token)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn verify(State(svc): State<Arc<AuthService>>, headers: HeaderMap) -> ApiResult<Json<serde_json::Value>> {
    let token = bearer_token(&headers).ok_or(ApiError::Unauthorized)?;
    Ok(Json(json!({"user_id": svc.verify(token)?})))
}

async fn retry(State(svc): State<Arc<AuthService>>) -> ApiResult<Json<RetryReport>> {
    Ok(Json(svc.retry_pending().await?))
}
