#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::Request;
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::Router;
use qms::auth::{self, AuthConfig, AuthService, Downstream};
use qms::dmdgs::{self, Dmdgs, RmsDirectory};
use qms::rms::{self, Rms, RmsConfig};
use qms::server::{bind, serve, Platform, PlatformConfig};
use qms::store::{Filter, Store};
use serde_json::{json, Value};
use tempfile::TempDir;
use tokio::task::JoinHandle;

pub struct Api {
    pub base: String,
    pub token: Option<String>,
    http: reqwest::Client,
}

impl Api {
    pub fn new(base: impl Into<String>) -> Self {
        Api { base: base.into(), token: None, http: reqwest::Client::new() }
    }

    pub fn with_token(&self, token: &str) -> Self {
        Api { base: self.base.clone(), token: Some(token.to_string()), http: self.http.clone() }
    }

    pub async fn raw(&self, method: reqwest::Method, path: &str, body: Option<&Value>) -> reqwest::Response {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.json(b);
        }
        req.send().await.expect("request sent")
    }

    async fn call(&self, method: reqwest::Method, path: &str, body: Option<&Value>) -> (StatusCode, Value) {
        let resp = self.raw(method, path, body).await;
        let status = StatusCode::from_u16(resp.status().as_u16()).unwrap();
        let bytes = resp.bytes().await.unwrap_or_default();
        (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    pub async fn get(&self, path: &str) -> (StatusCode, Value) {
        self.call(reqwest::Method::GET, path, None).await
    }

    pub async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        self.call(reqwest::Method::POST, path, Some(&body)).await
    }

    pub async fn text(&self, path: &str) -> (StatusCode, String) {
        let resp = self.raw(reqwest::Method::GET, path, None).await;
        let status = StatusCode::from_u16(resp.status().as_u16()).unwrap();
        (status, resp.text().await.unwrap())
    }
}

pub async fn platform_with(edit: impl FnOnce(&mut PlatformConfig)) -> (TempDir, Platform) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PlatformConfig::ephemeral(dir.path().join("data"));
    cfg.host = "127.0.0.1".into();
    edit(&mut cfg);
    let platform = Platform::start(&cfg).await.expect("platform starts");
    (dir, platform)
}

pub async fn platform() -> (TempDir, Platform) {
    platform_with(|_| {}).await
}

/// Signs up and signs in through the gateway; returns the user id and an
/// authenticated client.
pub async fn register(gateway: &Api, name: &str) -> (String, Api) {
    let email = format!("{name}@example.org");
    let (status, body) =
        gateway.post("/api/auth/signup", json!({"username": name, "email": email, "password": "correct horse"})).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    let (status, session) = gateway.post("/api/auth/signin", json!({"email": email, "password": "correct horse"})).await;
    assert_eq!(status, StatusCode::OK, "{session}");
    (body["user_id"].as_str().unwrap().to_string(), gateway.with_token(session["token"].as_str().unwrap()))
}

pub async fn wait_for_job(api: &Api, job_id: &str, limit: Duration) -> Value {
    let deadline = tokio::time::Instant::now() + limit;
    loop {
        let (status, job) = api.get(&format!("/api/rms/jobs/{job_id}")).await;
        assert_eq!(status, StatusCode::OK, "{job}");
        if job["state"] == "done" || job["state"] == "failed" {
            return job;
        }
        assert!(tokio::time::Instant::now() < deadline, "job {job_id} still {}", job["state"]);
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

pub const DEMO_PAIRS: &str = include_str!("../../data/demo_dataset.jsonl");

/// Registers a builtin model and the demo dataset; returns their ids.
pub async fn seed_demo(api: &Api) -> (String, String) {
    let (status, model) = api.post("/api/rms/models", json!({"name": "reference-lm", "kind": "builtin"})).await;
    assert!(status.is_success(), "{model}");
    let (status, dataset) = api
        .post(
            "/api/rms/datasets",
            json!({"name": "demo", "domain": "Industry Process Description", "task": "Summarization", "jsonl": DEMO_PAIRS}),
        )
        .await;
    assert_eq!(status, StatusCode::CREATED, "{dataset}");
    (model["id"].as_str().unwrap().into(), dataset["id"].as_str().unwrap().into())
}

pub fn identification(model_id: &str) -> Value {
    json!({
        "model_id": model_id,
        "domain": "industry process description",
        "purpose": "information extraction",
        "capabilities": ["text generation"],
        "ai_user": "business analyst",
        "ai_subject": "business process",
    })
}

/// Runs identification, the analysis and assembly; returns the assessment.
pub async fn full_assessment(api: &Api, model_id: &str, dataset_id: &str, metrics: &[&str]) -> Value {
    let (status, ident) = api.post("/api/rms/identifications", identification(model_id)).await;
    assert_eq!(status, StatusCode::CREATED, "{ident}");
    let (status, started) = api
        .post(
            "/api/rms/analyses",
            json!({"model_id": model_id, "dataset_id": dataset_id, "metrics": metrics, "params": {"max_iterations": 5}}),
        )
        .await;
    assert_eq!(status, StatusCode::ACCEPTED, "{started}");
    let job = wait_for_job(api, started["job_id"].as_str().unwrap(), Duration::from_secs(60)).await;
    assert_eq!(job["state"], "done", "{job}");
    let (status, assessment) =
        api.post("/api/rms/assessments", json!({"identification_id": ident["id"], "analysis_id": started["analysis_id"]})).await;
    assert_eq!(status, StatusCode::CREATED, "{assessment}");
    assessment
}

/// Auth wired to rms and dmdgs, with a switch that makes rms answer 503.
pub struct PropagationRig {
    pub auth: Arc<AuthService>,
    pub rms: Arc<Rms>,
    pub dmdgs: Arc<Dmdgs>,
    pub rms_down: Arc<AtomicBool>,
    _dir: TempDir,
    handles: Vec<JoinHandle<()>>,
}

fn toggled(router: Router, down: Arc<AtomicBool>) -> Router {
    router.layer(middleware::from_fn(move |req: Request, next: Next| {
        let down = down.clone();
        async move {
            if down.load(Ordering::SeqCst) {
                StatusCode::SERVICE_UNAVAILABLE.into_response()
            } else {
                next.run(req).await
            }
        }
    }))
}

impl PropagationRig {
    pub async fn start() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let store = |name: &str| Store::open(dir.path().join(name)).unwrap();
        let (rms_l, rms_addr) = bind("127.0.0.1", 0).await.unwrap();
        let (dmdgs_l, dmdgs_addr) = bind("127.0.0.1", 0).await.unwrap();
        let rms_url = format!("http://{rms_addr}");
        let rms = Rms::start(store("rms"), RmsConfig::bundled()).unwrap();
        let dmdgs = Dmdgs::new(store("dmdgs"), Box::new(RmsDirectory::new(&rms_url, Duration::from_secs(5))));
        let rms_down = Arc::new(AtomicBool::new(false));
        let handles =
            vec![serve(rms_l, toggled(rms::router(rms.clone()), rms_down.clone())), serve(dmdgs_l, dmdgs::router(dmdgs.clone()))];
        let config = AuthConfig {
            downstream: vec![
                Downstream { name: "rms".into(), base_url: rms_url },
                Downstream { name: "dmdgs".into(), base_url: format!("http://{dmdgs_addr}") },
            ],
            ..AuthConfig::default()
        };
        let auth = Arc::new(AuthService::new(store("auth"), config).unwrap());
        PropagationRig { auth, rms, dmdgs, rms_down, _dir: dir, handles }
    }

    pub async fn signup(&self, name: &str) -> auth::SignupResponse {
        let req =
            serde_json::from_value(json!({"username": name, "email": format!("{name}@example.org"), "password": "long enough"}))
                .unwrap();
        self.auth.signup(req).await.unwrap()
    }

    /// User ids held by auth, rms and dmdgs.
    pub fn id_sets(&self) -> [BTreeSet<String>; 3] {
        let mirrored = |store: &Store| -> BTreeSet<String> {
            store
                .query("users", &Filter::new())
                .unwrap()
                .iter()
                .filter_map(|d| d.str_field("user_id").map(String::from))
                .collect()
        };
        [self.auth.user_ids().unwrap().into_iter().collect(), mirrored(self.rms.store()), mirrored(self.dmdgs.store())]
    }
}

impl Drop for PropagationRig {
    fn drop(&mut self) {
        for h in &self.handles {
            h.abort();
        }
    }
}

/// Echoes the request body unchanged, adding the method and path as headers.
pub fn echo_router() -> Router {
    Router::new().fallback(|req: Request| async move {
        let method = req.method().to_string();
        let path = req.uri().path().to_string();
        let user = req.headers().get("x-user-id").and_then(|v| v.to_str().ok()).unwrap_or("").to_string();
        let body = axum::body::to_bytes(req.into_body(), usize::MAX).await.unwrap();
        Response::builder()
            .header("x-echo-method", method)
            .header("x-echo-path", path)
            .header("x-echo-user", user)
            .body(axum::body::Body::from(body))
            .unwrap()
    })
}
