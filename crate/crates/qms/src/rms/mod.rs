//! Risk management service.
//!
//! Walks a model through component selection (model registry), risk
//! identification, verification data selection, risk analysis (metric jobs),
//! risk assessment and mitigation records. Every record belongs to the user
//! named by the gateway's user header.

pub mod jobs;
pub mod models;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use qms_core::risk::{classify, RiskError, RiskInput, RuleTable, VocabularyTerms};
use qms_core::suite::{EvaluationPair, MetricRegistry};
use qms_core::MetricParams;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::http::{from_value, ApiError, ApiResult, Clock, SystemClock, UserId};
use crate::store::{filter, Document, Filter, Store};

use jobs::{Analysis, Job, JobRunner, JobState, ANALYSES, JOBS};
use models::{ModelCache, RegisterModel, MODELS};

const USERS: &str = "users";
const IDENTIFICATIONS: &str = "identifications";
const DATASETS: &str = "datasets";
const ASSESSMENTS: &str = "assessments";
const MITIGATIONS: &str = "mitigations";

pub const DEFAULT_VOCABULARY: &str = include_str!("../../data/vocab.json");
pub const DEFAULT_RULES: &str = include_str!("../../data/risk_rules.json");

pub struct RmsConfig {
    pub workers: usize,
    pub vocabulary: VocabularyTerms,
    pub rules: RuleTable,
    /// Per-request timeout towards remote models.
    pub model_timeout: Duration,
    /// Global models registered at startup.
    pub registry: Vec<RegisterModel>,
}

impl RmsConfig {
    /// Bundled vocabulary and rules, two workers, no global models.
    pub fn bundled() -> Self {
        RmsConfig {
            workers: 2,
            vocabulary: serde_json::from_str(DEFAULT_VOCABULARY).expect("bundled vocabulary parses"),
            rules: serde_json::from_str(DEFAULT_RULES).expect("bundled rules parse"),
            model_timeout: Duration::from_secs(30),
            registry: Vec::new(),
        }
    }
}

pub struct Rms {
    store: Arc<Store>,
    vocabulary: VocabularyTerms,
    rules: RuleTable,
    models: Arc<ModelCache>,
    jobs: Arc<JobRunner>,
}

/// JSON view of a document: its body plus `id` and `created_at`.
pub fn doc_json(doc: &Document) -> Value {
    let mut v = doc.body.clone();
    if let Value::Object(map) = &mut v {
        map.insert("id".into(), doc.id.clone().into());
        map.insert("created_at".into(), json!(doc.created_at));
    }
    v
}

impl Rms {
    /// Validates the rule table, registers global models and resumes
    /// unfinished jobs. Must run inside a Tokio runtime.
    pub fn start(store: Store, config: RmsConfig) -> anyhow::Result<Arc<Self>> {
        Self::start_with_clock(store, config, Arc::new(SystemClock))
    }

    pub fn start_with_clock(store: Store, config: RmsConfig, clock: Arc<dyn Clock>) -> anyhow::Result<Arc<Self>> {
        config.rules.validate(&config.vocabulary).map_err(|e| anyhow::anyhow!("{e}"))?;
        let store = Arc::new(store);
        let models = Arc::new(ModelCache::new(store.clone(), config.model_timeout));
        for entry in config.registry {
            let name = entry.name.clone();
            models.register(None, entry).map_err(|e| anyhow::anyhow!("registering model `{name}`: {e:?}"))?;
        }
        let metrics = Arc::new(MetricRegistry::standard());
        let jobs = Arc::new(JobRunner::new(store.clone(), models.clone(), metrics, config.workers, clock));
        let rms = Arc::new(Rms { store, vocabulary: config.vocabulary, rules: config.rules, models, jobs });
        let s = rms.clone();
        rms.jobs
            .recover(move |dataset_id| s.dataset_pairs(dataset_id).ok())
            .map_err(|e| anyhow::anyhow!("recovering jobs: {e:?}"))?;
        Ok(rms)
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn dataset_pairs(&self, dataset_id: &str) -> ApiResult<Vec<EvaluationPair>> {
        let doc = self.store.get(DATASETS, dataset_id)?.ok_or_else(|| ApiError::not_found("dataset"))?;
        from_value(doc.field("pairs").cloned().unwrap_or_default(), "dataset pairs")
    }

    /// The document, if it exists and `user` owns it.
    fn owned(&self, collection: &str, id: &str, user: &str, what: &str) -> ApiResult<Document> {
        let doc = self.store.get(collection, id)?.ok_or_else(|| ApiError::not_found(format!("{what} {id}")))?;
        if doc.str_field("user_id") != Some(user) {
            return Err(ApiError::Forbidden(format!("{what} {id} belongs to another user")));
        }
        Ok(doc)
    }

    fn visible_model(&self, id: &str, user: &str) -> ApiResult<Document> {
        let doc = self.store.get(MODELS, id)?.ok_or_else(|| ApiError::not_found(format!("model {id}")))?;
        if !models::record(&doc)?.visible_to(user) {
            return Err(ApiError::Forbidden(format!("model {id} belongs to another user")));
        }
        Ok(doc)
    }

    fn ensure_user(&self, user: &str) -> ApiResult<Document> {
        let (doc, _) =
            self.store.insert_unique(USERS, &filter([("user_id", user)]), json!({"user_id": user, "assessment_ids": []}))?;
        Ok(doc)
    }

    pub fn identify(&self, user: &str, req: IdentificationRequest) -> ApiResult<Document> {
        self.visible_model(&req.model_id, user)?;
        let input = req.input.normalized();
        let c = classify(&self.rules, &self.vocabulary, &input).map_err(|e| match e {
            RiskError::UnknownTerm { field, term, suggestions } => ApiError::BadRequest {
                code: "unknown-vocabulary-term",
                message: format!("`{term}` is not a known {} term", field.name()),
                details: Some(json!({"field": field.name(), "term": term, "suggestions": suggestions})),
            },
            RiskError::InvalidTable(m) => ApiError::Internal(m),
        })?;
        let body = json!({
            "user_id": user,
            "model_id": req.model_id,
            "domain": input.domain,
            "purpose": input.purpose,
            "capabilities": input.capabilities,
            "ai_user": input.ai_user,
            "ai_subject": input.ai_subject,
            "is_gpai": input.is_gpai,
            "training_flops": input.training_flops,
            "risk_class": c.risk_class,
            "systemic_risk": c.systemic_risk,
            "rationale": c.rationale,
            "vocabulary_version": self.vocabulary.version,
            "rules_version": self.rules.version,
        });
        let id = self.store.insert(IDENTIFICATIONS, body)?;
        self.store.get(IDENTIFICATIONS, &id)?.ok_or_else(|| ApiError::not_found("identification"))
    }

    pub fn create_dataset(&self, user: &str, req: DatasetRequest) -> ApiResult<Document> {
        let mut pairs = req.pairs.unwrap_or_default();
        if let Some(jsonl) = &req.jsonl {
            pairs.extend(parse_jsonl(jsonl)?);
        }
        for (field, value) in [("name", &req.name), ("domain", &req.domain), ("task", &req.task)] {
            if value.trim().is_empty() {
                return Err(ApiError::bad_request("invalid-dataset", format!("{field} must not be empty")));
            }
        }
        if pairs.is_empty() {
            return Err(ApiError::bad_request("empty-pairs", "a verification dataset needs at least one pair"));
        }
        let body = json!({
            "user_id": user,
            "name": req.name.trim(),
            "domain": req.domain.trim(),
            "task": req.task.trim(),
            "pairs": pairs,
        });
        let id = self.store.insert(DATASETS, body)?;
        self.store.get(DATASETS, &id)?.ok_or_else(|| ApiError::not_found("dataset"))
    }

    pub fn start_analysis(&self, user: &str, req: AnalysisRequest) -> ApiResult<(String, String)> {
        let mut seen = BTreeSet::new();
        let selection: Vec<String> =
            req.metrics.iter().map(|m| m.trim().to_lowercase()).filter(|m| seen.insert(m.clone())).collect();
        if selection.is_empty() {
            return Err(ApiError::bad_request("invalid-params", "select at least one metric"));
        }
        req.params.validate().map_err(|m| ApiError::bad_request("invalid-params", m))?;
        self.visible_model(&req.model_id, user)?;
        self.owned(DATASETS, &req.dataset_id, user, "dataset")?;
        let pairs = self.dataset_pairs(&req.dataset_id)?;
        self.jobs.submit(user, &req.model_id, &req.dataset_id, pairs, selection, req.params)
    }

    pub fn assemble(&self, user: &str, identification_id: &str, analysis_id: &str) -> ApiResult<Document> {
        self.owned(IDENTIFICATIONS, identification_id, user, "identification")?;
        let analysis: Analysis = from_value(self.owned(ANALYSES, analysis_id, user, "analysis")?.body, "analysis")?;
        if analysis.status != JobState::Done {
            return Err(ApiError::Conflict {
                code: "analysis-incomplete",
                message: format!("analysis {analysis_id} is not done"),
            });
        }
        let body = json!({
            "user_id": user,
            "identification_id": identification_id,
            "analysis_id": analysis_id,
            "mitigation_ids": [],
        });
        let id = self.store.insert(ASSESSMENTS, body)?;
        let account = self.ensure_user(user)?;
        self.store.modify(USERS, &account.id, |body| {
            let ids = body["assessment_ids"].as_array_mut().ok_or_else(|| ApiError::Internal("malformed user".into()))?;
            if !ids.iter().any(|v| v == id.as_str()) {
                ids.push(id.clone().into());
            }
            Ok::<_, ApiError>(())
        })?;
        self.store.get(ASSESSMENTS, &id)?.ok_or_else(|| ApiError::not_found("assessment"))
    }

    pub fn add_mitigation(&self, user: &str, assessment_id: &str, description: &str) -> ApiResult<Document> {
        self.owned(ASSESSMENTS, assessment_id, user, "assessment")?;
        let description = description.trim();
        if description.is_empty() {
            return Err(ApiError::bad_request("empty-description", "mitigation description must not be empty"));
        }
        let id = self
            .store
            .insert(MITIGATIONS, json!({"user_id": user, "assessment_id": assessment_id, "description": description}))?;
        self.store.modify(ASSESSMENTS, assessment_id, |body| {
            let ids = body["mitigation_ids"].as_array_mut().ok_or_else(|| ApiError::Internal("malformed assessment".into()))?;
            ids.push(id.clone().into());
            Ok::<_, ApiError>(())
        })?;
        self.store.get(MITIGATIONS, &id)?.ok_or_else(|| ApiError::not_found("mitigation"))
    }

    /// Removes an assessment, its mitigations and its entry in the user's
    /// list. The identification and analysis it referenced are kept.
    pub fn delete_assessment(&self, user: &str, assessment_id: &str) -> ApiResult<()> {
        self.owned(ASSESSMENTS, assessment_id, user, "assessment")?;
        for m in self.store.query(MITIGATIONS, &filter([("assessment_id", assessment_id)]))? {
            self.store.delete(MITIGATIONS, &m.id)?;
        }
        self.store.delete(ASSESSMENTS, assessment_id)?;
        let account = self.ensure_user(user)?;
        self.store.modify(USERS, &account.id, |body| {
            if let Some(ids) = body["assessment_ids"].as_array_mut() {
                ids.retain(|v| v != assessment_id);
            }
            Ok::<_, ApiError>(())
        })?;
        Ok(())
    }

    /// Assessment with every record it references.
    pub fn bundle(&self, user: &str, assessment_id: &str) -> ApiResult<Value> {
        let a = self.owned(ASSESSMENTS, assessment_id, user, "assessment")?;
        let get = |collection: &str, id: Option<&str>| -> ApiResult<Value> {
            let id = id.unwrap_or_default();
            let doc = self.store.get(collection, id)?.ok_or_else(|| ApiError::Internal(format!("dangling {collection} {id}")))?;
            Ok(doc_json(&doc))
        };
        let identification = get(IDENTIFICATIONS, a.str_field("identification_id"))?;
        let analysis = get(ANALYSES, a.str_field("analysis_id"))?;
        let dataset = get(DATASETS, analysis["dataset_id"].as_str())?;
        let model = get(MODELS, analysis["model_id"].as_str())?;
        let mitigations = self.store.query(MITIGATIONS, &filter([("assessment_id", assessment_id)]))?;
        Ok(json!({
            "assessment": doc_json(&a),
            "identification": identification,
            "analysis": analysis,
            "dataset": dataset,
            "model": model,
            "mitigations": mitigations.iter().map(doc_json).collect::<Vec<_>>(),
        }))
    }

    fn list(&self, collection: &str, user: &str) -> ApiResult<Json<Value>> {
        let docs = self.store.query(collection, &filter([("user_id", user)]))?;
        Ok(Json(Value::Array(docs.iter().map(doc_json).collect())))
    }
}

pub fn parse_jsonl(text: &str) -> ApiResult<Vec<EvaluationPair>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| ApiError::bad_request("invalid-jsonl", format!("line {}: {e}", i + 1))))
        .collect()
}

#[derive(Debug, Deserialize)]
pub struct IdentificationRequest {
    pub model_id: String,
    #[serde(flatten)]
    pub input: RiskInput,
}

#[derive(Debug, Deserialize)]
pub struct DatasetRequest {
    pub name: String,
    pub domain: String,
    pub task: String,
    #[serde(default)]
    pub pairs: Option<Vec<EvaluationPair>>,
    /// Pairs as JSON lines, appended to `pairs`.
    #[serde(default)]
    pub jsonl: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct AnalysisRequest {
    pub model_id: String,
    pub dataset_id: String,
    pub metrics: Vec<String>,
    #[serde(default)]
    pub params: MetricParams,
}

#[derive(Debug, Deserialize)]
struct AssessmentRequest {
    identification_id: String,
    analysis_id: String,
}

#[derive(Debug, Deserialize)]
struct MitigationRequest {
    description: String,
}

#[derive(Debug, Deserialize)]
struct UserQuery {
    user: Option<String>,
}

#[derive(Debug, Deserialize)]
struct InternalUser {
    user_id: String,
}

type S = State<Arc<Rms>>;

pub fn router(rms: Arc<Rms>) -> Router {
    Router::new()
        .route("/rms/vocabulary", get(vocabulary))
        .route("/rms/rules", get(rules))
        .route("/rms/models", post(register_model).get(list_models))
        .route("/rms/models/:id", get(get_model))
        .route("/rms/identifications", post(identify).get(list_identifications))
        .route("/rms/identifications/:id", get(get_identification))
        .route("/rms/datasets", post(create_dataset).get(list_datasets))
        .route("/rms/datasets/:id", get(get_dataset))
        .route("/rms/analyses", post(start_analysis).get(list_analyses))
        .route("/rms/analyses/:id", get(get_analysis))
        .route("/rms/jobs/:id", get(get_job))
        .route("/rms/assessments", post(assemble).get(list_assessments))
        .route("/rms/assessments/:id", get(get_assessment).delete(delete_assessment))
        .route("/rms/assessments/:id/mitigations", post(add_mitigation).get(list_mitigations))
        .route("/rms/internal/users", post(add_user).get(list_users))
        .with_state(rms)
}

async fn vocabulary(State(rms): S) -> Json<VocabularyTerms> {
    Json(rms.vocabulary.clone())
}

async fn rules(State(rms): S) -> Json<RuleTable> {
    Json(rms.rules.clone())
}

async fn register_model(
    State(rms): S,
    UserId(user): UserId,
    Json(req): Json<RegisterModel>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let models = rms.models.clone();
    let (doc, created) = tokio::task::spawn_blocking(move || models.register(Some(&user), req)).await??;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(doc_json(&doc))))
}

async fn list_models(State(rms): S, UserId(user): UserId) -> ApiResult<Json<Value>> {
    let mut visible = Vec::new();
    for doc in rms.store.query(MODELS, &Filter::new())? {
        if models::record(&doc)?.visible_to(&user) {
            visible.push(doc_json(&doc));
        }
    }
    Ok(Json(Value::Array(visible)))
}

async fn get_model(State(rms): S, UserId(user): UserId, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(doc_json(&rms.visible_model(&id, &user)?)))
}

async fn identify(
    State(rms): S,
    UserId(user): UserId,
    Json(req): Json<IdentificationRequest>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    Ok((StatusCode::CREATED, Json(doc_json(&rms.identify(&user, req)?))))
}

async fn list_identifications(State(rms): S, UserId(user): UserId) -> ApiResult<Json<Value>> {
    rms.list(IDENTIFICATIONS, &user)
}

async fn get_identification(State(rms): S, UserId(user): UserId, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(doc_json(&rms.owned(IDENTIFICATIONS, &id, &user, "identification")?)))
}

async fn create_dataset(
    State(rms): S,
    UserId(user): UserId,
    Json(req): Json<DatasetRequest>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    Ok((StatusCode::CREATED, Json(doc_json(&rms.create_dataset(&user, req)?))))
}

async fn list_datasets(State(rms): S, UserId(user): UserId) -> ApiResult<Json<Value>> {
    rms.list(DATASETS, &user)
}

async fn get_dataset(State(rms): S, UserId(user): UserId, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(doc_json(&rms.owned(DATASETS, &id, &user, "dataset")?)))
}

async fn start_analysis(
    State(rms): S,
    UserId(user): UserId,
    Json(req): Json<AnalysisRequest>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let (job_id, analysis_id) = rms.start_analysis(&user, req)?;
    Ok((StatusCode::ACCEPTED, Json(json!({"job_id": job_id, "analysis_id": analysis_id}))))
}

async fn list_analyses(State(rms): S, UserId(user): UserId) -> ApiResult<Json<Value>> {
    rms.list(ANALYSES, &user)
}

async fn get_analysis(State(rms): S, UserId(user): UserId, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(doc_json(&rms.owned(ANALYSES, &id, &user, "analysis")?)))
}

async fn get_job(State(rms): S, UserId(user): UserId, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let doc = rms.owned(JOBS, &id, &user, "job")?;
    let job: Job = from_value(doc.body.clone(), "job")?;
    let mut out = doc_json(&doc);
    if job.state == JobState::Done {
        if let Some(a) = rms.store.get(ANALYSES, &job.analysis_id)? {
            out["results"] = a.field("results").cloned().unwrap_or_default();
        }
    }
    Ok(Json(out))
}

async fn assemble(
    State(rms): S,
    UserId(user): UserId,
    Json(req): Json<AssessmentRequest>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    Ok((StatusCode::CREATED, Json(doc_json(&rms.assemble(&user, &req.identification_id, &req.analysis_id)?))))
}

async fn list_assessments(State(rms): S, UserId(user): UserId, Query(q): Query<UserQuery>) -> ApiResult<Json<Value>> {
    if q.user.as_deref().is_some_and(|u| u != user) {
        return Err(ApiError::Forbidden("cannot list another user's assessments".into()));
    }
    rms.list(ASSESSMENTS, &user)
}

async fn get_assessment(State(rms): S, UserId(user): UserId, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(rms.bundle(&user, &id)?))
}

async fn delete_assessment(State(rms): S, UserId(user): UserId, Path(id): Path<String>) -> ApiResult<StatusCode> {
    rms.delete_assessment(&user, &id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn add_mitigation(
    State(rms): S,
    UserId(user): UserId,
    Path(id): Path<String>,
    Json(req): Json<MitigationRequest>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    Ok((StatusCode::CREATED, Json(doc_json(&rms.add_mitigation(&user, &id, &req.description)?))))
}

async fn list_mitigations(State(rms): S, UserId(user): UserId, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    rms.owned(ASSESSMENTS, &id, &user, "assessment")?;
    let docs = rms.store.query(MITIGATIONS, &filter([("assessment_id", id.as_str())]))?;
    Ok(Json(Value::Array(docs.iter().map(doc_json).collect())))
}

async fn add_user(State(rms): S, Json(req): Json<InternalUser>) -> ApiResult<(StatusCode, Json<Value>)> {
    if req.user_id.trim().is_empty() {
        return Err(ApiError::bad_request("invalid-user", "user_id must not be empty"));
    }
    let (doc, created) = rms.store.insert_unique(
        USERS,
        &filter([("user_id", req.user_id.as_str())]),
        json!({"user_id": req.user_id, "assessment_ids": []}),
    )?;
    Ok((if created { StatusCode::CREATED } else { StatusCode::OK }, Json(doc_json(&doc))))
}

async fn list_users(State(rms): S) -> ApiResult<Json<Value>> {
    let ids: Vec<Value> =
        rms.store.query(USERS, &Filter::new())?.into_iter().filter_map(|d| d.field("user_id").cloned()).collect();
    Ok(Json(json!({"user_ids": ids})))
}
