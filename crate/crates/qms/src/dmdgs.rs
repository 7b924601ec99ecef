//! Data management and governance service: references to the datasets a
//! model was trained, validated or tested on, each with a compliance
//! attestation.
//!
//! References are immutable; a new attestation means a new reference and
//! check pair.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::http::{from_value, ApiError, ApiResult, Clock, SystemClock, UserId, USER_HEADER};
use crate::rms::doc_json;
use crate::store::{filter, Filter, Store};

const USERS: &str = "users";
const REFERENCES: &str = "data_references";
const CHECKS: &str = "data_checks";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Training,
    Validation,
    Testing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeUnit {
    Examples,
    Tokens,
    Bytes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataReference {
    pub user_id: String,
    pub model_id: String,
    pub dataset_name: String,
    pub origin: String,
    pub data_type: String,
    pub domain: String,
    pub size: u64,
    pub size_unit: SizeUnit,
    pub split: Split,
}

#[derive(Debug, Deserialize)]
pub struct DataCheckRequest {
    pub model_id: String,
    pub dataset_name: String,
    #[serde(default)]
    pub origin: String,
    #[serde(default)]
    pub data_type: String,
    #[serde(default)]
    pub domain: String,
    pub size: u64,
    pub size_unit: SizeUnit,
    pub split: Split,
    pub compliance_reference: String,
}

/// How the service confirms that a model is registered.
#[axum::async_trait]
pub trait ModelDirectory: Send + Sync {
    async fn model_exists(&self, user: &str, model_id: &str) -> ApiResult<bool>;
}

/// Asks the risk management service, forwarding the caller's identity.
pub struct RmsDirectory {
    base_url: String,
    client: reqwest::Client,
}

impl RmsDirectory {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let client = reqwest::Client::builder().timeout(timeout).build().expect("http client");
        RmsDirectory { base_url: base_url.trim_end_matches('/').to_string(), client }
    }
}

#[axum::async_trait]
impl ModelDirectory for RmsDirectory {
    async fn model_exists(&self, user: &str, model_id: &str) -> ApiResult<bool> {
        let url = format!("{}/rms/models/{model_id}", self.base_url);
        let resp = self
            .client
            .get(&url)
            .header(USER_HEADER, user)
            .send()
            .await
            .map_err(|e| ApiError::BadGateway(format!("model registry unreachable: {e}")))?;
        match resp.status() {
            s if s.is_success() => Ok(true),
            StatusCode::NOT_FOUND | StatusCode::FORBIDDEN => Ok(false),
            s => Err(ApiError::BadGateway(format!("model registry answered {s}"))),
        }
    }
}

pub struct Dmdgs {
    store: Store,
    models: Box<dyn ModelDirectory>,
    clock: Arc<dyn Clock>,
}

impl Dmdgs {
    pub fn new(store: Store, models: Box<dyn ModelDirectory>) -> Arc<Self> {
        Self::with_clock(store, models, Arc::new(SystemClock))
    }

    pub fn with_clock(store: Store, models: Box<dyn ModelDirectory>, clock: Arc<dyn Clock>) -> Arc<Self> {
        Arc::new(Dmdgs { store, models, clock })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub async fn create(&self, user: &str, req: DataCheckRequest) -> ApiResult<Value> {
        let compliance = req.compliance_reference.trim().to_string();
        if compliance.is_empty() {
            return Err(ApiError::bad_request("empty-compliance-reference", "compliance reference must not be empty"));
        }
        if req.dataset_name.trim().is_empty() {
            return Err(ApiError::bad_request("invalid-data-reference", "dataset name must not be empty"));
        }
        if !self.models.model_exists(user, &req.model_id).await? {
            return Err(ApiError::NotFound(format!("model {}", req.model_id)));
        }
        let reference = DataReference {
            user_id: user.to_string(),
            model_id: req.model_id,
            dataset_name: req.dataset_name.trim().to_string(),
            origin: req.origin.trim().to_string(),
            data_type: req.data_type.trim().to_string(),
            domain: req.domain.trim().to_string(),
            size: req.size,
            size_unit: req.size_unit,
            split: req.split,
        };
        let body = serde_json::to_value(&reference).map_err(|e| ApiError::Internal(e.to_string()))?;
        let reference_id = self.store.insert(REFERENCES, body)?;
        let check = json!({
            "user_id": user,
            "data_reference_id": reference_id,
            "compliance_reference": compliance,
            "checked_at": self.clock.now(),
        });
        let check_id = match self.store.insert(CHECKS, check) {
            Ok(id) => id,
            Err(e) => {
                let _ = self.store.delete(REFERENCES, &reference_id);
                return Err(e.into());
            }
        };
        let (account, _) =
            self.store.insert_unique(USERS, &filter([("user_id", user)]), json!({"user_id": user, "data_ids": []}))?;
        self.store.modify(USERS, &account.id, |body| {
            let ids = body["data_ids"].as_array_mut().ok_or_else(|| ApiError::Internal("malformed user".into()))?;
            ids.push(reference_id.clone().into());
            Ok::<_, ApiError>(())
        })?;
        self.entry(&check_id)
    }

    /// A check joined with its data reference.
    fn entry(&self, check_id: &str) -> ApiResult<Value> {
        let check = self.store.get(CHECKS, check_id)?.ok_or_else(|| ApiError::not_found(format!("data check {check_id}")))?;
        let ref_id = check.str_field("data_reference_id").unwrap_or_default();
        let reference =
            self.store.get(REFERENCES, ref_id)?.ok_or_else(|| ApiError::Internal(format!("dangling data reference {ref_id}")))?;
        Ok(json!({"data_check": doc_json(&check), "data_reference": doc_json(&reference)}))
    }

    pub fn get(&self, user: &str, check_id: &str) -> ApiResult<Value> {
        let entry = self.entry(check_id)?;
        if entry["data_check"]["user_id"] != user {
            return Err(ApiError::Forbidden(format!("data check {check_id} belongs to another user")));
        }
        Ok(entry)
    }

    /// The user's checks, newest first, optionally for one model.
    pub fn list(&self, user: &str, model_id: Option<&str>) -> ApiResult<Vec<Value>> {
        let mut entries = Vec::new();
        for check in self.store.query(CHECKS, &filter([("user_id", user)]))? {
            let entry = self.entry(&check.id)?;
            if model_id.is_none_or(|m| entry["data_reference"]["model_id"] == m) {
                let checked_at: DateTime<Utc> = from_value(check.field("checked_at").cloned().unwrap_or_default(), "data check")?;
                entries.push((checked_at, check.seq, entry));
            }
        }
        entries.sort_by_key(|e| std::cmp::Reverse((e.0, e.1)));
        Ok(entries.into_iter().map(|(_, _, e)| e).collect())
    }

    pub fn data_ids(&self, user: &str) -> ApiResult<Vec<String>> {
        let doc = self.store.query(USERS, &filter([("user_id", user)]))?.into_iter().next();
        match doc {
            Some(d) => from_value(d.field("data_ids").cloned().unwrap_or_default(), "user"),
            None => Ok(Vec::new()),
        }
    }
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    user: Option<String>,
    model: Option<String>,
}

#[derive(Debug, Deserialize)]
struct InternalUser {
    user_id: String,
}

type S = State<Arc<Dmdgs>>;

pub fn router(svc: Arc<Dmdgs>) -> Router {
    Router::new()
        .route("/dmdgs/data-checks", post(create).get(list))
        .route("/dmdgs/data-checks/:id", get(get_one))
        .route("/dmdgs/internal/users", post(add_user).get(list_users))
        .with_state(svc)
}

async fn create(State(svc): S, UserId(user): UserId, Json(req): Json<DataCheckRequest>) -> ApiResult<(StatusCode, Json<Value>)> {
    Ok((StatusCode::CREATED, Json(svc.create(&user, req).await?)))
}

async fn list(State(svc): S, UserId(user): UserId, Query(q): Query<ListQuery>) -> ApiResult<Json<Vec<Value>>> {
    if q.user.as_deref().is_some_and(|u| u != user) {
        return Err(ApiError::Forbidden("cannot list another user's data checks".into()));
    }
    Ok(Json(svc.list(&user, q.model.as_deref())?))
}

async fn get_one(State(svc): S, UserId(user): UserId, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(svc.get(&user, &id)?))
}

async fn add_user(State(svc): S, Json(req): Json<InternalUser>) -> ApiResult<(StatusCode, Json<Value>)> {
    if req.user_id.trim().is_empty() {
        return Err(ApiError::bad_request("invalid-user", "user_id must not be empty"));
    }
    let (doc, created) = svc.store.insert_unique(
        USERS,
        &filter([("user_id", req.user_id.as_str())]),
        json!({"user_id": req.user_id, "data_ids": []}),
    )?;
    Ok((if created { StatusCode::CREATED } else { StatusCode::OK }, Json(doc_json(&doc))))
}

async fn list_users(State(svc): S) -> ApiResult<Json<Value>> {
    let ids: Vec<Value> =
        svc.store.query(USERS, &Filter::new())?.into_iter().filter_map(|d| d.field("user_id").cloned()).collect();
    Ok(Json(json!({"user_ids": ids})))
}
