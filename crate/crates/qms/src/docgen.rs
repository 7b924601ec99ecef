//! Technical documentation for a risk assessment, as Markdown or JSON.
//!
//! Rendering is a pure function of the assessment bundle, the data checks
//! and the generation time; only the `Generated:` line depends on the time.
//! Numbers are shown with at most six significant digits.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::{DateTime, SecondsFormat, Utc};
use qms_core::suite::{ACCURACY, ADVERSARIAL, PERPLEXITY, ROUGE, SALIENCY};
use qms_core::MetricOutcome;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::http::{from_value, ApiError, ApiResult, Clock, SystemClock, UserId, USER_HEADER};
use crate::rms::jobs::{Analysis, JobState, MetricEntry};

pub const DOCUMENT_VERSION: u32 = 1;

pub const SECTIONS: [&str; 8] = [
    "1 System description & intended purpose",
    "2 Model descriptor",
    "3 Risk class & rationale",
    "4 Verification data",
    "5 Risk-analysis results",
    "6 Data management & governance",
    "7 Mitigation measures",
    "8 Versioning & timestamps",
];

pub const NONE_RECORDED: &str = "None recorded.";

/// Everything a document is rendered from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TechnicalDocumentation {
    pub document_version: u32,
    pub generated_at: DateTime<Utc>,
    pub sections: Vec<String>,
    pub assessment: Value,
    pub identification: Value,
    pub model: Value,
    pub dataset: Value,
    pub analysis: Analysis,
    pub mitigations: Vec<Value>,
    pub data_checks: Vec<Value>,
}

impl TechnicalDocumentation {
    /// Builds from the risk service's assessment bundle and data-check
    /// entries. Fails unless the analysis is done.
    pub fn new(bundle: &Value, data_checks: Vec<Value>, generated_at: DateTime<Utc>) -> ApiResult<Self> {
        let analysis: Analysis = from_value(bundle["analysis"].clone(), "analysis")?;
        if analysis.status != JobState::Done {
            return Err(ApiError::Conflict { code: "analysis-incomplete", message: "the analysis is not done".into() });
        }
        Ok(TechnicalDocumentation {
            document_version: DOCUMENT_VERSION,
            generated_at,
            sections: SECTIONS.iter().map(|s| s.to_string()).collect(),
            assessment: bundle["assessment"].clone(),
            identification: bundle["identification"].clone(),
            model: bundle["model"].clone(),
            dataset: bundle["dataset"].clone(),
            analysis,
            mitigations: bundle["mitigations"].as_array().cloned().unwrap_or_default(),
            data_checks,
        })
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let model_name = text(&self.model["name"]);
        let _ = writeln!(md, "# Technical Documentation: {model_name}\n");
        self.system(&mut md);
        self.model_descriptor(&mut md);
        self.risk_class(&mut md);
        self.verification_data(&mut md);
        self.results(&mut md);
        self.data_governance(&mut md);
        self.mitigation(&mut md);
        self.versioning(&mut md);
        md
    }

    fn system(&self, md: &mut String) {
        let id = &self.identification;
        heading(md, 0);
        field(md, "Domain", &text(&id["domain"]));
        field(md, "Purpose", &text(&id["purpose"]));
        field(md, "Capabilities", &list(&id["capabilities"]));
        field(md, "AI user", &text(&id["ai_user"]));
        field(md, "AI subject", &text(&id["ai_subject"]));
        field(md, "General-purpose AI model", if id["is_gpai"].as_bool() == Some(true) { "yes" } else { "no" });
        let flops = id["training_flops"].as_f64().map_or_else(|| "not stated".to_string(), fmt_num);
        field(md, "Training compute (FLOPs)", &flops);
        md.push('\n');
    }

    fn model_descriptor(&self, md: &mut String) {
        let m = &self.model;
        heading(md, 1);
        field(md, "Model id", &text(&m["id"]));
        field(md, "Name", &text(&m["name"]));
        field(md, "Kind", &text(&m["kind"]));
        if let Some(url) = m["base_url"].as_str() {
            field(md, "Endpoint", url);
        }
        if let Some(s) = m["summary"].as_object() {
            for (label, key) in [
                ("Vocabulary size", "vocabulary_size"),
                ("Embedding dimension", "embedding_dim"),
                ("Context length", "context_len"),
                ("Parameter count", "parameter_count"),
            ] {
                field(md, label, &text(&s[key]));
            }
            field(md, "Training corpus SHA-256", &text(&s["corpus_digest"]));
            field(md, "Corpus NLL before training", &s["initial_nll"].as_f64().map_or_else(String::new, fmt_num));
            field(md, "Corpus NLL after training", &s["final_nll"].as_f64().map_or_else(String::new, fmt_num));
        }
        md.push('\n');
    }

    fn risk_class(&self, md: &mut String) {
        let id = &self.identification;
        heading(md, 2);
        field(md, "Risk class", &text(&id["risk_class"]));
        field(md, "Systemic risk", if id["systemic_risk"].as_bool() == Some(true) { "yes" } else { "no" });
        field(md, "Vocabulary version", &text(&id["vocabulary_version"]));
        field(md, "Rule table version", &text(&id["rules_version"]));
        md.push_str("\nRules fired, in evaluation order:\n\n");
        for rule in id["rationale"].as_array().into_iter().flatten() {
            let _ = writeln!(md, "- {}", text(rule));
        }
        md.push('\n');
    }

    fn verification_data(&self, md: &mut String) {
        let d = &self.dataset;
        heading(md, 3);
        field(md, "Dataset id", &text(&d["id"]));
        field(md, "Name", &text(&d["name"]));
        field(md, "Domain", &text(&d["domain"]));
        field(md, "Task", &text(&d["task"]));
        let pairs = d["pairs"].as_array().cloned().unwrap_or_default();
        field(md, "Pairs", &pairs.len().to_string());
        for (i, p) in pairs.iter().enumerate() {
            let _ = writeln!(md, "\nPair {}: input\n", i + 1);
            quote(md, &text(&p["input"]));
            md.push_str("\nExpected output\n\n");
            quote(md, &text(&p["expected_output"]));
        }
        md.push('\n');
    }

    fn results(&self, md: &mut String) {
        let a = &self.analysis;
        let p = &a.params;
        heading(md, 4);
        let orders: Vec<String> = p.rouge_n.iter().map(usize::to_string).collect();
        let _ = writeln!(
            md,
            "Parameters: epsilon {}, max iterations {}, ROUGE orders {}, max new tokens {}, seed {}\n",
            fmt_num(p.epsilon),
            p.max_iterations,
            orders.join(", "),
            p.max_new_tokens,
            p.seed
        );
        md.push_str("| Metric | Status | Result |\n|---|---|---|\n");
        for name in &a.selected_metrics {
            let (status, value) = match a.results.get(name) {
                Some(MetricEntry::Ok { result }) => ("ok".to_string(), summary(result)),
                Some(MetricEntry::Failed { reason, message }) => {
                    let reason = serde_json::to_value(reason).ok().map(|v| text(&v)).unwrap_or_default();
                    (format!("failed ({reason})"), message.clone())
                }
                None => ("missing".to_string(), String::new()),
            };
            let _ = writeln!(md, "| {} | {} | {} |", cell(name), cell(&status), cell(&value));
        }

        let ok = |name: &str| match a.results.get(name) {
            Some(MetricEntry::Ok { result }) => Some(result),
            _ => None,
        };
        let mut performance = String::new();
        for (name, outcome) in a.results.iter().filter_map(|(n, e)| match e {
            MetricEntry::Ok { result } if ![SALIENCY, ADVERSARIAL].contains(&n.as_str()) => Some((n, result)),
            _ => None,
        }) {
            per_pair(&mut performance, name, outcome);
        }
        md.push_str("\n### Performance\n\n");
        md.push_str(if performance.is_empty() { "Not analyzed.\n" } else { &performance });

        md.push_str("\n### Explainability\n\n");
        match ok(SALIENCY) {
            Some(MetricOutcome::Saliency { maps }) => {
                for (i, map) in maps.iter().enumerate() {
                    let _ = writeln!(md, "Saliency map for pair {} (generated output: `{}`)\n", i + 1, inline(&map.output));
                    md.push_str("| Token | Gradient norm | Normalized |\n|---|---|---|\n");
                    for e in &map.entries {
                        let _ = writeln!(md, "| {} | {} | {} |", cell(&e.token), fmt_num(e.raw), fmt_num(e.normalized));
                    }
                    md.push('\n');
                }
            }
            _ => md.push_str("Not analyzed.\n\n"),
        }

        md.push_str("### Consistency\n\n");
        match ok(ADVERSARIAL) {
            Some(MetricOutcome::Adversarial { results }) => {
                for (i, r) in results.iter().enumerate() {
                    let verdict = if r.fooled {
                        format!("fooled after {} iterations", r.iterations)
                    } else {
                        format!("not fooled within {} iterations", r.iterations)
                    };
                    let _ =
                        writeln!(md, "Pair {}: {verdict} (epsilon {}, budget {})\n", i + 1, fmt_num(r.epsilon), r.max_iterations);
                    md.push_str("Ground-truth output\n\n");
                    quote(md, &r.ground_truth_output);
                    md.push_str("\nAdversarial output\n\n");
                    quote(md, &r.adversarial_output);
                    md.push_str("\nPerturbed input\n\n");
                    quote(md, &r.perturbed_input);
                    md.push('\n');
                }
            }
            _ => md.push_str("Not analyzed.\n\n"),
        }
    }

    fn data_governance(&self, md: &mut String) {
        heading(md, 5);
        if self.data_checks.is_empty() {
            let _ = writeln!(md, "{NONE_RECORDED}\n");
            return;
        }
        md.push_str("| Dataset | Split | Size | Origin | Type | Domain | Compliance reference | Checked at |\n");
        md.push_str("|---|---|---|---|---|---|---|---|\n");
        for entry in &self.data_checks {
            let r = &entry["data_reference"];
            let c = &entry["data_check"];
            let size = format!("{} {}", text(&r["size"]), text(&r["size_unit"]));
            let row = [
                text(&r["dataset_name"]),
                text(&r["split"]),
                size,
                text(&r["origin"]),
                text(&r["data_type"]),
                text(&r["domain"]),
                text(&c["compliance_reference"]),
                text(&c["checked_at"]),
            ];
            let cells: Vec<String> = row.iter().map(|s| cell(s)).collect();
            let _ = writeln!(md, "| {} |", cells.join(" | "));
        }
        md.push('\n');
    }

    fn mitigation(&self, md: &mut String) {
        heading(md, 6);
        if self.mitigations.is_empty() {
            let _ = writeln!(md, "{NONE_RECORDED}\n");
            return;
        }
        for (i, m) in self.mitigations.iter().enumerate() {
            let _ = writeln!(md, "{}. {} (recorded {})", i + 1, inline(&text(&m["description"])), text(&m["created_at"]));
        }
        md.push('\n');
    }

    fn versioning(&self, md: &mut String) {
        heading(md, 7);
        field(md, "Document version", &self.document_version.to_string());
        field(md, "Assessment id", &text(&self.assessment["id"]));
        field(md, "Assessment created", &text(&self.assessment["created_at"]));
        field(md, "Identification id", &text(&self.identification["id"]));
        field(md, "Identification created", &text(&self.identification["created_at"]));
        field(md, "Analysis id", &text(&self.assessment["analysis_id"]));
        let completed = self.analysis.completed_at.map(|t| t.to_rfc3339_opts(SecondsFormat::Micros, true)).unwrap_or_default();
        field(md, "Analysis completed", &completed);
        let _ = writeln!(md, "\nGenerated: {}", self.generated_at.to_rfc3339_opts(SecondsFormat::Micros, true));
    }
}

fn heading(md: &mut String, i: usize) {
    let _ = writeln!(md, "## {}\n", SECTIONS[i]);
}

fn field(md: &mut String, label: &str, value: &str) {
    let _ = writeln!(md, "- {label}: {}", inline(value));
}

fn quote(md: &mut String, body: &str) {
    if body.is_empty() {
        md.push_str(">\n");
    }
    for line in body.lines() {
        let _ = writeln!(md, "> {line}");
    }
}

fn inline(s: &str) -> String {
    s.replace(['\r', '\n'], " ")
}

fn cell(s: &str) -> String {
    inline(s).replace('|', "\\|")
}

/// Strings verbatim, other values as compact JSON, null as empty.
fn text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        Value::Number(n) => n.as_f64().filter(|_| !n.is_i64() && !n.is_u64()).map_or_else(|| n.to_string(), fmt_num),
        other => other.to_string(),
    }
}

fn list(v: &Value) -> String {
    v.as_array().map(|a| a.iter().map(text).collect::<Vec<_>>().join(", ")).unwrap_or_default()
}

/// Formats with at most six significant digits: fixed notation for
/// exponents in `-5..6`, otherwise scientific. Non-finite values print as
/// `inf`, `-inf`, `nan`.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_string()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// One-cell summary of a metric outcome.
fn summary(outcome: &MetricOutcome) -> String {
    match outcome {
        MetricOutcome::Accuracy { mean, .. } => format!("mean {}", fmt_num(*mean)),
        MetricOutcome::Rouge { by_order } => by_order
            .iter()
            .map(|(n, s)| format!("ROUGE-{n} P {} R {} F1 {}", fmt_num(s.precision), fmt_num(s.recall), fmt_num(s.f1)))
            .collect::<Vec<_>>()
            .join("; "),
        MetricOutcome::Perplexity { mean, .. } => format!("mean {}", fmt_num(*mean)),
        MetricOutcome::Saliency { maps } => {
            let tops: Vec<String> = maps
                .iter()
                .map(|m| {
                    m.entries
                        .iter()
                        .max_by(|a, b| a.raw.total_cmp(&b.raw))
                        .map_or_else(|| "-".to_string(), |e| format!("`{}` {}", e.token, fmt_num(e.raw)))
                })
                .collect();
            format!("{} maps; most salient token per pair: {}", maps.len(), tops.join(", "))
        }
        MetricOutcome::Adversarial { results } => {
            let fooled = results.iter().filter(|r| r.fooled).count();
            let iters: Vec<String> = results.iter().map(|r| r.iterations.to_string()).collect();
            format!("fooled {fooled}/{}; iterations per pair: {}", results.len(), iters.join(", "))
        }
        MetricOutcome::Scores { values } => {
            values.iter().map(|(k, v)| format!("{k} {}", fmt_num(*v))).collect::<Vec<_>>().join("; ")
        }
    }
}

fn per_pair(md: &mut String, name: &str, outcome: &MetricOutcome) {
    let scores = |md: &mut String, label: &str, values: &[f64]| {
        let v: Vec<String> = values.iter().map(|x| fmt_num(*x)).collect();
        let _ = writeln!(md, "- {label} per pair: {}", v.join(", "));
    };
    match outcome {
        MetricOutcome::Accuracy { per_pair, .. } if name == ACCURACY => scores(md, "Accuracy", per_pair),
        MetricOutcome::Perplexity { per_pair, .. } if name == PERPLEXITY => scores(md, "Perplexity", per_pair),
        MetricOutcome::Rouge { .. } if name == ROUGE => {
            let _ = writeln!(md, "- ROUGE means: {}", summary(outcome));
        }
        other => {
            let _ = writeln!(md, "- {name}: {}", summary(other));
        }
    }
}

pub struct Docgen {
    rms_url: String,
    dmdgs_url: String,
    client: reqwest::Client,
    clock: Arc<dyn Clock>,
}

impl Docgen {
    pub fn new(rms_url: &str, dmdgs_url: &str, timeout: Duration) -> Arc<Self> {
        Self::with_clock(rms_url, dmdgs_url, timeout, Arc::new(SystemClock))
    }

    pub fn with_clock(rms_url: &str, dmdgs_url: &str, timeout: Duration, clock: Arc<dyn Clock>) -> Arc<Self> {
        let client = reqwest::Client::builder().timeout(timeout).build().expect("http client");
        Arc::new(Docgen {
            rms_url: rms_url.trim_end_matches('/').to_string(),
            dmdgs_url: dmdgs_url.trim_end_matches('/').to_string(),
            client,
            clock,
        })
    }

    async fn fetch(&self, user: &str, url: String) -> ApiResult<Value> {
        let resp = self
            .client
            .get(&url)
            .header(USER_HEADER, user)
            .send()
            .await
            .map_err(|e| ApiError::BadGateway(format!("{url}: {e}")))?;
        let status = resp.status();
        let body: Value = resp.json().await.map_err(|e| ApiError::BadGateway(format!("{url}: {e}")))?;
        let message = body["message"].as_str().unwrap_or_default().to_string();
        match status {
            s if s.is_success() => Ok(body),
            StatusCode::NOT_FOUND => Err(ApiError::NotFound(message)),
            StatusCode::FORBIDDEN => Err(ApiError::Forbidden(message)),
            s => Err(ApiError::BadGateway(format!("{url} answered {s}: {message}"))),
        }
    }

    /// Uses the listed data checks, or every check on the assessed model.
    pub async fn document(
        &self,
        user: &str,
        assessment_id: &str,
        data_checks: Option<Vec<String>>,
    ) -> ApiResult<TechnicalDocumentation> {
        let bundle = self.fetch(user, format!("{}/rms/assessments/{assessment_id}", self.rms_url)).await?;
        let checks = match data_checks {
            Some(ids) => {
                let mut out = Vec::new();
                for id in ids {
                    out.push(self.fetch(user, format!("{}/dmdgs/data-checks/{id}", self.dmdgs_url)).await?);
                }
                out
            }
            None => {
                let model = bundle["model"]["id"].as_str().unwrap_or_default();
                let url = format!("{}/dmdgs/data-checks?model={model}", self.dmdgs_url);
                self.fetch(user, url).await?.as_array().cloned().unwrap_or_default()
            }
        };
        TechnicalDocumentation::new(&bundle, checks, self.clock.now())
    }
}

#[derive(Debug, Deserialize)]
struct DocumentQuery {
    #[serde(default)]
    format: Option<String>,
    /// Comma-separated data-check ids.
    #[serde(default)]
    data_checks: Option<String>,
}

pub fn router(svc: Arc<Docgen>) -> Router {
    Router::new().route("/docgen/assessments/:id/document", get(document)).with_state(svc)
}

async fn document(
    State(svc): State<Arc<Docgen>>,
    UserId(user): UserId,
    Path(id): Path<String>,
    Query(q): Query<DocumentQuery>,
) -> ApiResult<Response> {
    let format = q.format.as_deref().unwrap_or("markdown");
    if !matches!(format, "markdown" | "json") {
        return Err(ApiError::bad_request("invalid-format", "format must be markdown or json"));
    }
    let ids = q.data_checks.map(|s| s.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect());
    let doc = svc.document(&user, &id, ids).await?;
    Ok(if format == "json" {
        Json(doc).into_response()
    } else {
        ([(header::CONTENT_TYPE, "text/markdown; charset=utf-8")], doc.to_markdown()).into_response()
    })
}
