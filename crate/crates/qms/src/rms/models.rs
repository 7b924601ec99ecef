//! Model registry: registration, descriptors, and loading for evaluation.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use qms_core::{LanguageModel, ModelError, ReferenceLm, TrainingConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::http::{from_value, ApiError, ApiResult};
use crate::model_http::HttpModel;
use crate::store::{filter, Document, Store};

pub const MODELS: &str = "models";
const WEIGHTS: &str = "model_weights";

/// Text the built-in model is trained on when no corpus is given.
pub const BUNDLED_CORPUS: &str = include_str!("../../data/corpus.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Builtin {
        #[serde(default)]
        training: TrainingConfig,
    },
    Http {
        base_url: String,
    },
}

/// Stored description of a registered model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    /// Owner; `None` for models from the registry file, visible to all.
    pub user_id: Option<String>,
    pub name: String,
    #[serde(flatten)]
    pub spec: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<BuiltinSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuiltinSummary {
    pub vocabulary_size: usize,
    pub embedding_dim: usize,
    pub context_len: usize,
    pub parameter_count: usize,
    pub corpus_digest: String,
    pub initial_nll: f64,
    pub final_nll: f64,
}

impl ModelRecord {
    pub fn visible_to(&self, user: &str) -> bool {
        self.user_id.as_deref().is_none_or(|owner| owner == user)
    }
}

/// Registration request body.
#[derive(Debug, Deserialize)]
pub struct RegisterModel {
    pub name: String,
    #[serde(flatten)]
    pub spec: ModelSpec,
    /// Training text for builtin models; the bundled corpus when absent.
    #[serde(default)]
    pub corpus: Option<String>,
}

/// `[[model]]` entry of the registry file.
#[derive(Debug, Clone, Deserialize)]
pub struct RegistryEntry {
    pub name: String,
    #[serde(flatten)]
    pub spec: ModelSpec,
    /// Corpus path, relative to the registry file.
    #[serde(default)]
    pub corpus: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
pub struct RegistryFile {
    #[serde(default, rename = "model")]
    pub models: Vec<RegistryEntry>,
}

impl RegistryFile {
    /// Reads the file and resolves corpus paths into corpus text.
    pub fn load(path: &Path) -> anyhow::Result<Vec<RegisterModel>> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        let file: RegistryFile = toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        file.models
            .into_iter()
            .map(|entry| {
                let corpus = match entry.corpus {
                    Some(rel) => Some(std::fs::read_to_string(base.join(&rel)).map_err(|e| anyhow::anyhow!("{rel}: {e}"))?),
                    None => None,
                };
                Ok(RegisterModel { name: entry.name, spec: entry.spec, corpus })
            })
            .collect()
    }
}

pub fn record(doc: &Document) -> ApiResult<ModelRecord> {
    from_value(doc.body.clone(), "model")
}

/// Loaded models shared read-only across jobs. Remote models are not
/// cached: each job opens its own connection.
pub struct ModelCache {
    store: Arc<Store>,
    builtin: Mutex<HashMap<String, Arc<ReferenceLm>>>,
    timeout: Duration,
}

pub enum Loaded {
    Builtin(Arc<ReferenceLm>),
    Http(HttpModel),
}

impl Loaded {
    pub fn as_model(&self) -> &dyn LanguageModel {
        match self {
            Loaded::Builtin(m) => m.as_ref(),
            Loaded::Http(m) => m,
        }
    }
}

impl ModelCache {
    pub fn new(store: Arc<Store>, timeout: Duration) -> Self {
        ModelCache { store, builtin: Mutex::new(HashMap::new()), timeout }
    }

    /// Trains (for builtin models) and persists a model. Blocking.
    pub fn register(&self, owner: Option<&str>, req: RegisterModel) -> ApiResult<(Document, bool)> {
        let name = req.name.trim().to_string();
        if name.is_empty() {
            return Err(ApiError::bad_request("invalid-model", "model name must not be empty"));
        }
        let key = filter([("user_id", owner.map_or(serde_json::Value::Null, |o| o.into())), ("name", name.clone().into())]);
        if let Some(existing) = self.store.query(MODELS, &key)?.into_iter().next() {
            return Ok((existing, false));
        }
        let (summary, weights) = match &req.spec {
            ModelSpec::Builtin { training } => {
                let corpus = req.corpus.as_deref().unwrap_or(BUNDLED_CORPUS);
                let (model, report) =
                    ReferenceLm::train(corpus, training).map_err(|e| ApiError::bad_request("invalid-training", e.to_string()))?;
                let summary = BuiltinSummary {
                    vocabulary_size: model.vocabulary().len(),
                    embedding_dim: model.embedding_dim(),
                    context_len: model.context_len(),
                    parameter_count: model.parameter_count(),
                    corpus_digest: model.corpus_digest().to_string(),
                    initial_nll: report.initial_nll,
                    final_nll: report.final_nll,
                };
                (Some(summary), Some(model))
            }
            ModelSpec::Http { base_url } => {
                if !(base_url.starts_with("http://") || base_url.starts_with("https://")) {
                    return Err(ApiError::bad_request("invalid-model", "base_url must be an http(s) URL"));
                }
                (None, None)
            }
        };
        let rec = ModelRecord { user_id: owner.map(str::to_string), name, spec: req.spec, summary };
        let body = serde_json::to_value(&rec).map_err(|e| ApiError::Internal(e.to_string()))?;
        let (doc, created) = self.store.insert_unique(MODELS, &key, body)?;
        if let (true, Some(model)) = (created, weights) {
            let params = serde_json::to_value(&model).map_err(|e| ApiError::Internal(e.to_string()))?;
            self.store.insert(WEIGHTS, json!({"model_id": doc.id, "parameters": params}))?;
            self.builtin.lock().insert(doc.id.clone(), Arc::new(model));
        }
        Ok((doc, created))
    }

    /// Opens the model for evaluation. Blocking.
    pub fn load(&self, model_id: &str) -> Result<Loaded, ModelError> {
        let backend = |e: &dyn std::fmt::Display| ModelError::Backend(e.to_string());
        let doc = self
            .store
            .get(MODELS, model_id)
            .map_err(|e| backend(&e))?
            .ok_or_else(|| ModelError::InvalidInput(format!("unknown model {model_id}")))?;
        let rec = record(&doc).map_err(|e| backend(&format!("{e:?}")))?;
        match rec.spec {
            ModelSpec::Http { base_url } => Ok(Loaded::Http(HttpModel::connect(&base_url, self.timeout)?)),
            ModelSpec::Builtin { .. } => {
                if let Some(m) = self.builtin.lock().get(model_id) {
                    return Ok(Loaded::Builtin(m.clone()));
                }
                let weights = self
                    .store
                    .query(WEIGHTS, &filter([("model_id", model_id)]))
                    .map_err(|e| backend(&e))?
                    .into_iter()
                    .next()
                    .ok_or_else(|| backend(&"model parameters missing"))?;
                let params = weights.field("parameters").cloned().unwrap_or_default();
                let model: ReferenceLm = serde_json::from_value(params).map_err(|e| backend(&e))?;
                let model = Arc::new(model);
                self.builtin.lock().insert(model_id.to_string(), model.clone());
                Ok(Loaded::Builtin(model))
            }
        }
    }
}
