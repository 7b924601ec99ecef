//! The `qms` command-line client. Every command talks to the platform only
//! through the gateway.
//!
//! Exit codes: 0 success, 1 operation failed, 2 usage error.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use qms_core::suite::STANDARD_METRICS;
use qms_core::{MemoryEstimate, Precision};
use serde::Deserialize;
use serde_json::{json, Value};

pub const DEMO_DATASET: &str = include_str!("../data/demo_dataset.jsonl");
pub const DEMO_DATASET_NAME: &str = "demo-actor-activity";
pub const DEMO_MODEL_NAME: &str = "reference-lm";
pub const POLL_INTERVAL: Duration = Duration::from_millis(250);

#[derive(Debug, Parser)]
#[command(name = "qms", version, about = "Quality management platform client")]
pub struct Cli {
    /// Gateway base URL [default: http://127.0.0.1:8080]
    #[arg(long, global = true)]
    pub gateway_url: Option<String>,
    /// Session token; signs in with the configured credentials when absent
    #[arg(long, global = true)]
    pub token: Option<String>,
    /// TOML file with gateway_url, token, username, email, password
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create the demo user, reference model and demo dataset
    Seed,
    /// Classify, analyze and assess a model, then export its documentation
    Assess(Box<AssessArgs>),
    /// Estimate the memory needed to hold a model's parameters
    Estimate(EstimateArgs),
    /// Export the documentation of an existing assessment
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct AssessArgs {
    /// Model name or id
    #[arg(long, default_value = DEMO_MODEL_NAME)]
    pub model: String,
    /// Dataset name or id
    #[arg(long, default_value = DEMO_DATASET_NAME)]
    pub dataset: String,
    /// Comma-separated metric names
    #[arg(long, value_delimiter = ',', default_values_t = STANDARD_METRICS.map(String::from))]
    pub metrics: Vec<String>,
    /// Adversarial step size
    #[arg(long, default_value_t = 0.05, value_parser = positive_f64, allow_negative_numbers = true)]
    pub epsilon: f64,
    /// Adversarial iteration budget
    #[arg(long = "max-iters", default_value_t = 50)]
    pub max_iters: usize,
    /// ROUGE orders, comma-separated
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2], value_parser = rouge_order)]
    pub rouge: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "industry process description")]
    pub domain: String,
    #[arg(long, default_value = "information extraction")]
    pub purpose: String,
    /// Capability, repeatable
    #[arg(long = "capability", default_values_t = ["text generation".to_string()])]
    pub capabilities: Vec<String>,
    #[arg(long, default_value = "business analyst")]
    pub ai_user: String,
    #[arg(long, default_value = "business process")]
    pub ai_subject: String,
    /// The model is a general-purpose AI model
    #[arg(long)]
    pub gpai: bool,
    #[arg(long, value_parser = positive_f64)]
    pub training_flops: Option<f64>,
    /// Markdown output path [default: assessment-<id>.md]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seconds to wait for the analysis
    #[arg(long, default_value_t = 600)]
    pub wait_secs: u64,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Parameter count, e.g. 7e9
    #[arg(long, value_parser = parameter_count)]
    pub params: u64,
    /// fp32 or fp16
    #[arg(long, default_value = "fp32", value_parser = precision)]
    pub precision: Precision,
    /// Also hold one gradient per parameter
    #[arg(long)]
    pub gradients: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub assessment: String,
    /// markdown or json
    #[arg(long, default_value = "markdown", value_parser = ["markdown", "json"])]
    pub format: String,
    /// Data-check ids to include; all checks on the model when omitted
    #[arg(long, value_delimiter = ',')]
    pub data_checks: Vec<String>,
    /// Output path; standard output when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        Ok(_) => Err("must be a positive number".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn rouge_order(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err("must be a positive integer".into()),
    }
}

fn parameter_count(s: &str) -> Result<u64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !(v.is_finite() && v >= 1.0 && v.fract() == 0.0 && v <= u64::MAX as f64) {
        return Err("must be a positive whole number".into());
    }
    Ok(v as u64)
}

fn precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: qms_core::memory::UnknownPrecision| e.to_string())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub gateway_url: Option<String>,
    pub token: Option<String>,
    pub username: Option<String>,
    pub email: Option<String>,
    pub password: Option<String>,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Operation(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Operation(_) => 1,
        }
    }
}

type Outcome<T> = Result<T, Failure>;

fn op<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Operation(msg.into()))
}

pub struct Client {
    base: String,
    token: Option<String>,
    http: reqwest::blocking::Client,
}

impl Client {
    pub fn new(base: &str) -> Self {
        let http = reqwest::blocking::Client::builder().timeout(Duration::from_secs(120)).build().expect("http client");
        Client { base: base.trim_end_matches('/').to_string(), token: None, http }
    }

    fn call(&self, method: reqwest::Method, path: &str, body: Option<&Value>) -> Outcome<reqwest::blocking::Response> {
        let url = format!("{}/api/{path}", self.base);
        let mut req = self.http.request(method.clone(), &url);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.json(b);
        }
        let prefix = path.split('/').next().unwrap_or(path);
        let resp = req.send().map_err(|e| {
            Failure::Operation(format!("{method} /api/{path}: `{prefix}` service unreachable via gateway {}: {e}", self.base))
        })?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let text = resp.text().unwrap_or_default();
        let detail = serde_json::from_str::<Value>(&text)
            .ok()
            .map(|v| format!("{}: {}", v["error"].as_str().unwrap_or("error"), v["message"].as_str().unwrap_or("")))
            .unwrap_or(text);
        op(format!("{method} /api/{path} (`{prefix}` service) failed with {status}: {detail}"))
    }

    pub fn get(&self, path: &str) -> Outcome<Value> {
        self.call(reqwest::Method::GET, path, None)?.json().map_err(|e| Failure::Operation(e.to_string()))
    }

    pub fn get_text(&self, path: &str) -> Outcome<String> {
        self.call(reqwest::Method::GET, path, None)?.text().map_err(|e| Failure::Operation(e.to_string()))
    }

    pub fn post(&self, path: &str, body: &Value) -> Outcome<Value> {
        self.call(reqwest::Method::POST, path, Some(body))?.json().map_err(|e| Failure::Operation(e.to_string()))
    }
}

struct Session {
    client: Client,
    config: CliConfig,
}

impl Session {
    fn credentials(&self) -> (String, String, String) {
        let c = &self.config;
        (
            c.username.clone().unwrap_or_else(|| "demo".into()),
            c.email.clone().unwrap_or_else(|| "demo@example.org".into()),
            c.password.clone().unwrap_or_else(|| "demo-password".into()),
        )
    }

    fn sign_in(&mut self) -> Outcome<String> {
        let (_, email, password) = self.credentials();
        let s = self.client.post("auth/signin", &json!({"email": email, "password": password}))?;
        let token = s["token"].as_str().ok_or_else(|| Failure::Operation("sign-in returned no token".into()))?;
        self.client.token = Some(token.to_string());
        Ok(s["user_id"].as_str().unwrap_or_default().to_string())
    }

    fn ensure_token(&mut self) -> Outcome<()> {
        if self.client.token.is_none() {
            self.sign_in()?;
        }
        Ok(())
    }

    /// Id of the single record in `list` whose id or name equals `key`.
    fn resolve(&self, list_path: &str, key: &str, what: &str) -> Outcome<String> {
        let items = self.client.get(list_path)?;
        let items = items.as_array().cloned().unwrap_or_default();
        if let Some(hit) = items.iter().find(|v| v["id"] == key) {
            return Ok(hit["id"].as_str().unwrap_or_default().to_string());
        }
        let mut named: Vec<&Value> = items.iter().filter(|v| v["name"] == key).collect();
        if named.len() > 1 {
            named.retain(|v| !v["user_id"].is_null());
        }
        match named.as_slice() {
            [one] => Ok(one["id"].as_str().unwrap_or_default().to_string()),
            [] => op(format!("no {what} named `{key}`")),
            many => op(format!("{} {what}s are named `{key}`; pass an id", many.len())),
        }
    }

    fn seed(&mut self) -> Outcome<()> {
        let (username, email, password) = self.credentials();
        let signup = self.client.post("auth/signup", &json!({"username": username, "email": email, "password": password}));
        match signup {
            Ok(r) => {
                for p in r["propagation"].as_array().into_iter().flatten() {
                    if p["status"] != "ok" {
                        eprintln!("warning: user propagation to {} pending", p["service"].as_str().unwrap_or("?"));
                    }
                }
            }
            Err(Failure::Operation(m)) if m.contains("duplicate-email") => {}
            Err(e) => return Err(e),
        }
        let user_id = self.sign_in()?;
        println!("user: {user_id} ({email})");

        let models = self.client.get("rms/models")?;
        let existing =
            models.as_array().into_iter().flatten().find(|m| m["name"] == DEMO_MODEL_NAME && m["user_id"] == user_id.as_str());
        let model_id = match existing {
            Some(m) => m["id"].as_str().unwrap_or_default().to_string(),
            None => {
                let m = self.client.post("rms/models", &json!({"name": DEMO_MODEL_NAME, "kind": "builtin"}))?;
                m["id"].as_str().unwrap_or_default().to_string()
            }
        };
        println!("model: {model_id} ({DEMO_MODEL_NAME})");

        let datasets = self.client.get("rms/datasets")?;
        let existing = datasets.as_array().into_iter().flatten().find(|d| d["name"] == DEMO_DATASET_NAME).cloned();
        let dataset = match existing {
            Some(d) => d,
            None => self.client.post(
                "rms/datasets",
                &json!({
                    "name": DEMO_DATASET_NAME,
                    "domain": "Industry Process Description",
                    "task": "Summarization",
                    "jsonl": DEMO_DATASET,
                }),
            )?,
        };
        println!("dataset: {} ({DEMO_DATASET_NAME})", dataset["id"].as_str().unwrap_or_default());
        Ok(())
    }

    fn assess(&mut self, a: &AssessArgs) -> Outcome<()> {
        self.ensure_token()?;
        let model_id = self.resolve("rms/models", &a.model, "model")?;
        let dataset_id = self.resolve("rms/datasets", &a.dataset, "dataset")?;

        let ident = self.client.post(
            "rms/identifications",
            &json!({
                "model_id": model_id,
                "domain": a.domain,
                "purpose": a.purpose,
                "capabilities": a.capabilities,
                "ai_user": a.ai_user,
                "ai_subject": a.ai_subject,
                "is_gpai": a.gpai,
                "training_flops": a.training_flops,
            }),
        )?;
        println!(
            "risk class: {}{}",
            ident["risk_class"].as_str().unwrap_or("?"),
            if ident["systemic_risk"] == true { " (systemic risk)" } else { "" }
        );

        let started = self.client.post(
            "rms/analyses",
            &json!({
                "model_id": model_id,
                "dataset_id": dataset_id,
                "metrics": a.metrics,
                "params": {
                    "epsilon": a.epsilon,
                    "max_iterations": a.max_iters,
                    "rouge_n": a.rouge,
                    "max_new_tokens": a.max_new_tokens,
                    "seed": a.seed,
                },
            }),
        )?;
        let job_id = started["job_id"].as_str().unwrap_or_default().to_string();
        let analysis_id = started["analysis_id"].as_str().unwrap_or_default().to_string();
        let deadline = Instant::now() + Duration::from_secs(a.wait_secs);
        loop {
            let job = self.client.get(&format!("rms/jobs/{job_id}"))?;
            match job["state"].as_str() {
                Some("done") => break,
                Some("failed") => return op(format!("analysis job {job_id} failed: {}", job["error"].as_str().unwrap_or(""))),
                _ if Instant::now() >= deadline => return op(format!("analysis job {job_id} did not finish in time")),
                _ => std::thread::sleep(POLL_INTERVAL),
            }
        }

        let assessment =
            self.client.post("rms/assessments", &json!({"identification_id": ident["id"], "analysis_id": analysis_id}))?;
        let id = assessment["id"].as_str().unwrap_or_default().to_string();
        let markdown = self.client.get_text(&format!("docgen/assessments/{id}/document?format=markdown"))?;
        let out = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("assessment-{id}.md")));
        write(&out, &markdown)?;
        println!("assessment: {id}");
        println!("document: {}", out.display());
        Ok(())
    }

    fn export(&mut self, e: &ExportArgs) -> Outcome<()> {
        self.ensure_token()?;
        let mut path = format!("docgen/assessments/{}/document?format={}", e.assessment, e.format);
        if !e.data_checks.is_empty() {
            path.push_str(&format!("&data_checks={}", e.data_checks.join(",")));
        }
        let doc = self.client.get_text(&path)?;
        match &e.out {
            Some(out) => write(out, &doc),
            None => {
                print!("{doc}");
                Ok(())
            }
        }
    }
}

fn write(path: &Path, text: &str) -> Outcome<()> {
    std::fs::write(path, text).map_err(|e| Failure::Operation(format!("writing {}: {e}", path.display())))
}

pub fn estimate(args: &EstimateArgs) -> Outcome<MemoryEstimate> {
    MemoryEstimate::new(args.params, args.precision, args.gradients)
        .ok_or_else(|| Failure::Usage("parameter count must be positive".into()))
}

fn load_config(path: Option<&Path>) -> Outcome<CliConfig> {
    let Some(path) = path else { return Ok(CliConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

pub fn run(cli: Cli) -> Outcome<()> {
    if let Command::Estimate(args) = &cli.command {
        println!("{}", estimate(args)?);
        return Ok(());
    }
    let config = load_config(cli.config.as_deref())?;
    let base = cli.gateway_url.clone().or_else(|| config.gateway_url.clone()).unwrap_or_else(|| "http://127.0.0.1:8080".into());
    let mut client = Client::new(&base);
    client.token = cli.token.clone().or_else(|| config.token.clone());
    let mut session = Session { client, config };
    match &cli.command {
        Command::Seed => session.seed(),
        Command::Assess(a) => session.assess(a),
        Command::Export(e) => session.export(e),
        Command::Estimate(_) => unreachable!(),
    }
}

/// Parses `args`, runs the command, and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            let (Failure::Usage(m) | Failure::Operation(m)) = &f;
            eprintln!("error: {m}");
            f.code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("qms").chain(args.iter().copied()))
    }

    #[test]
    fn estimates_match_closed_form() {
        let run = |args: &[&str]| {
            let Command::Estimate(e) = parse(args).unwrap().command else { panic!() };
            estimate(&e).unwrap().to_string()
        };
        assert_eq!(run(&["estimate", "--params", "7e9", "--precision", "fp32"]), "28000000000 bytes (28 GB)");
        assert_eq!(run(&["estimate", "--params", "7e9", "--precision", "fp32", "--gradients"]), "56000000000 bytes (56 GB)");
        assert_eq!(run(&["estimate", "--params", "7e9", "--precision", "fp16", "--gradients"]), "28000000000 bytes (28 GB)");
        assert!(run(&["estimate", "--params", "1", "--precision", "fp32"]).starts_with("4 bytes"));
    }

    #[test]
    fn usage_errors() {
        for args in [
            &["estimate", "--params", "many"][..],
            &["estimate", "--params", "0"],
            &["estimate", "--params", "1.5"],
            &["estimate", "--params", "7e9", "--precision", "int8"],
            &["assess", "--epsilon", "-1"],
            &["assess", "--epsilon", "0"],
            &["assess", "--rouge", "0"],
            &["frobnicate"],
        ] {
            let err = parse(args).unwrap_err();
            assert!(err.use_stderr(), "{args:?}");
        }
    }

    #[test]
    fn assess_defaults() {
        let Command::Assess(a) = parse(&["assess", "--metrics", "accuracy,rouge"]).unwrap().command else { panic!() };
        assert_eq!(a.metrics, ["accuracy", "rouge"]);
        assert_eq!(a.model, DEMO_MODEL_NAME);
        assert_eq!(a.rouge, [1, 2]);
        let Command::Assess(a) = parse(&["assess"]).unwrap().command else { panic!() };
        assert_eq!(a.metrics.len(), 5);
    }

    #[test]
    fn bad_epsilon_fails_without_network() {
        let code = main_with(["qms", "--gateway-url", "http://192.0.2.1:9", "assess", "--epsilon", "-1"]);
        assert_eq!(code, 2);
    }
}
