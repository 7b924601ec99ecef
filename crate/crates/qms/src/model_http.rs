//! Language models behind HTTP.
//!
//! [`HttpModel`] adapts a remote model to [`LanguageModel`]; [`router`]
//! serves any local model with the same wire format:
//!
//! | route                  | request                               | response               |
//! |------------------------|---------------------------------------|------------------------|
//! | `GET /vocabulary`      |                                       | `{tokens}`             |
//! | `GET /embeddings`      |                                       | `{rows, cols, data}`   |
//! | `POST /logits`         | `{context}`                           | `{logits}`             |
//! | `POST /generate`       | `{prompt, max_new_tokens}`            | `{tokens}`             |
//! | `POST /input_gradient` | `{prompt_embeddings, target}`         | `{loss, rows}`         |
//!
//! Token lists are vocabulary ids. A model without gradients answers 404 on
//! the last two routes, which the adapter reports as unsupported.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use qms_core::linalg::Matrix;
use qms_core::model::InputGradient;
use qms_core::{LanguageModel, ModelError, TokenId, Vocabulary};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
pub struct VocabularyBody {
    pub tokens: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LogitsRequest {
    pub context: Vec<TokenId>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LogitsResponse {
    pub logits: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: Vec<TokenId>,
    pub max_new_tokens: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GradientRequest {
    pub prompt_embeddings: Matrix,
    pub target: Vec<TokenId>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GradientResponse {
    pub loss: f64,
    pub rows: Matrix,
}

pub struct HttpModel {
    base_url: String,
    client: reqwest::blocking::Client,
    vocab: Vocabulary,
    embeddings: Option<Matrix>,
}

fn backend(e: impl std::fmt::Display) -> ModelError {
    ModelError::Backend(e.to_string())
}

impl HttpModel {
    /// Fetches the vocabulary and, when offered, the embedding table.
    /// Blocking: call from a thread that may block.
    pub fn connect(base_url: &str, timeout: Duration) -> Result<Self, ModelError> {
        let client = reqwest::blocking::Client::builder().timeout(timeout).build().map_err(backend)?;
        let base_url = base_url.trim_end_matches('/').to_string();
        let mut model = HttpModel { base_url, client, vocab: Vocabulary::from_words::<_, &str>([]), embeddings: None };
        let body: VocabularyBody = model.get("vocabulary")?.ok_or_else(|| backend("model has no vocabulary route"))?;
        model.vocab = Vocabulary::try_from(body.tokens).map_err(|e| backend(format!("bad vocabulary: {e}")))?;
        model.embeddings = model.get("embeddings")?;
        if let Some(table) = &model.embeddings {
            if table.rows() != model.vocab.len() {
                return Err(backend("embedding table does not match the vocabulary"));
            }
        }
        Ok(model)
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn url(&self, route: &str) -> String {
        format!("{}/{route}", self.base_url)
    }

    fn get<T: serde::de::DeserializeOwned>(&self, route: &str) -> Result<Option<T>, ModelError> {
        let resp = self.client.get(self.url(route)).send().map_err(backend)?;
        Self::decode(route, resp)
    }

    fn post<B: Serialize, T: serde::de::DeserializeOwned>(&self, route: &str, body: &B) -> Result<Option<T>, ModelError> {
        let resp = self.client.post(self.url(route)).json(body).send().map_err(backend)?;
        Self::decode(route, resp)
    }

    fn decode<T: serde::de::DeserializeOwned>(route: &str, resp: reqwest::blocking::Response) -> Result<Option<T>, ModelError> {
        match resp.status() {
            StatusCode::NOT_FOUND => Ok(None),
            StatusCode::BAD_REQUEST => Err(ModelError::InvalidInput(resp.text().unwrap_or_default())),
            s if s.is_success() => resp.json().map(Some).map_err(backend),
            s => Err(backend(format!("/{route} answered {s}"))),
        }
    }

    fn required<T>(route: &str, value: Option<T>) -> Result<T, ModelError> {
        value.ok_or_else(|| ModelError::Unsupported(format!("model has no /{route} route")))
    }
}

impl LanguageModel for HttpModel {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logits(&self, context: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        let r: Option<LogitsResponse> = self.post("logits", &LogitsRequest { context: context.to_vec() })?;
        let logits = Self::required("logits", r)?.logits;
        if logits.len() != self.vocab.len() {
            return Err(backend(format!("expected {} logits, got {}", self.vocab.len(), logits.len())));
        }
        Ok(logits)
    }

    fn generate(&self, prompt: &[TokenId], max_new_tokens: usize) -> Result<Vec<TokenId>, ModelError> {
        let req = GenerateRequest { prompt: prompt.to_vec(), max_new_tokens };
        let r: Option<GenerateResponse> = self.post("generate", &req)?;
        Ok(Self::required("generate", r)?.tokens)
    }

    fn embeddings(&self) -> Option<&Matrix> {
        self.embeddings.as_ref()
    }

    fn embedding_gradient(&self, prompt_rows: &Matrix, target: &[TokenId]) -> Result<InputGradient, ModelError> {
        let req = GradientRequest { prompt_embeddings: prompt_rows.clone(), target: target.to_vec() };
        let r: Option<GradientResponse> = self.post("input_gradient", &req)?;
        let r = Self::required("input_gradient", r)?;
        if (r.rows.rows(), r.rows.cols()) != (prompt_rows.rows(), prompt_rows.cols()) {
            return Err(backend("gradient shape does not match the prompt"));
        }
        Ok(InputGradient { loss: r.loss, rows: r.rows })
    }
}

pub type SharedModel = Arc<dyn LanguageModel + Send + Sync>;

struct Served {
    model: SharedModel,
}

struct ModelFailure(ModelError);

impl IntoResponse for ModelFailure {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            ModelError::InvalidInput(_) => StatusCode::BAD_REQUEST,
            ModelError::Unsupported(_) => StatusCode::NOT_FOUND,
            ModelError::Backend(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, self.0.to_string()).into_response()
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ModelError> + Send + 'static,
) -> Result<Json<T>, ModelFailure> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json).map_err(ModelFailure),
        Err(e) => Err(ModelFailure(backend(e))),
    }
}

/// Serves `model`. With `gradients` false the embedding and gradient routes
/// are absent.
pub fn router(model: SharedModel, gradients: bool) -> Router {
    let mut r =
        Router::new().route("/vocabulary", get(vocabulary)).route("/logits", post(logits)).route("/generate", post(generate));
    if gradients {
        r = r.route("/embeddings", get(embeddings)).route("/input_gradient", post(input_gradient));
    }
    r.with_state(Arc::new(Served { model }))
}

async fn vocabulary(State(s): State<Arc<Served>>) -> Json<VocabularyBody> {
    Json(VocabularyBody { tokens: s.model.vocabulary().clone().into() })
}

async fn embeddings(State(s): State<Arc<Served>>) -> Result<Json<Matrix>, ModelFailure> {
    s.model.embeddings().cloned().map(Json).ok_or_else(|| ModelFailure(ModelError::Unsupported("input embeddings".into())))
}

async fn logits(State(s): State<Arc<Served>>, Json(req): Json<LogitsRequest>) -> Result<Json<LogitsResponse>, ModelFailure> {
    blocking(move || Ok(LogitsResponse { logits: s.model.logits(&req.context)? })).await
}

async fn generate(
    State(s): State<Arc<Served>>,
    Json(req): Json<GenerateRequest>,
) -> Result<Json<GenerateResponse>, ModelFailure> {
    blocking(move || Ok(GenerateResponse { tokens: s.model.generate(&req.prompt, req.max_new_tokens)? })).await
}

async fn input_gradient(
    State(s): State<Arc<Served>>,
    Json(req): Json<GradientRequest>,
) -> Result<Json<GradientResponse>, ModelFailure> {
    blocking(move || {
        let g = s.model.embedding_gradient(&req.prompt_embeddings, &req.target)?;
        Ok(GradientResponse { loss: g.loss, rows: g.rows })
    })
    .await
}
