//! API gateway: the single public entry point.
//!
//! Routes come from an env-style file. Each `SERVICE_<NAME>=<address>` line
//! maps the prefix `<name>` (lowercased) to a service, so
//! `/api/<name>/<rest>` is forwarded to `<address>/<name>/<rest>`. Other
//! recognized keys:
//!
//! - `GATEWAY_LISTEN`: `host:port` to bind
//! - `GATEWAY_CORS_ORIGINS`: comma-separated allowed browser origins
//! - `GATEWAY_TIMEOUT_SECS`: upstream timeout (default 30)
//! - `GATEWAY_MAX_BODY_BYTES`: request body limit (default 64 MiB)
//!
//! Unknown keys are ignored. Every request except sign-up and sign-in must
//! carry a bearer token, which the `auth` route verifies; the resulting user
//! id travels upstream in the `x-user-id` header. Service paths under
//! `internal/` are never exposed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::extract::{Request, State};
use axum::http::{header, HeaderMap, HeaderName, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::any;
use axum::Router;
use chrono::{DateTime, Utc};
use serde_json::Value;
use thiserror::Error;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::http::{ApiError, USER_HEADER};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_MAX_BODY: usize = 64 * 1024 * 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RouteError {
    #[error("cannot read {path}: {message}")]
    Unreadable { path: PathBuf, message: String },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("duplicate prefix `{prefix}` on lines {first} and {second}")]
    DuplicatePrefix { prefix: String, first: usize, second: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    pub address: String,
    /// 1-based line in the source file.
    pub line: usize,
}

#[derive(Debug, Clone)]
pub struct RouteTable {
    pub entries: BTreeMap<String, Route>,
    pub loaded_from: Option<PathBuf>,
    pub loaded_at: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub routes: RouteTable,
    pub listen: Option<String>,
    pub cors_origins: Vec<String>,
    pub timeout: Duration,
    pub max_body: usize,
}

impl RouteTable {
    pub fn address(&self, prefix: &str) -> Option<&str> {
        self.entries.get(prefix).map(|r| r.address.as_str())
    }
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    for q in ['"', '\''] {
        if let Some(inner) = v.strip_prefix(q).and_then(|s| s.strip_suffix(q)) {
            return inner;
        }
    }
    v
}

fn valid_address(addr: &str) -> bool {
    reqwest::Url::parse(addr)
        .is_ok_and(|u| matches!(u.scheme(), "http" | "https") && u.host_str().is_some() && u.query().is_none())
}

impl GatewayConfig {
    pub fn parse(text: &str) -> Result<Self, RouteError> {
        let mut entries: BTreeMap<String, Route> = BTreeMap::new();
        let mut cfg = GatewayConfig {
            routes: RouteTable { entries: BTreeMap::new(), loaded_from: None, loaded_at: Utc::now() },
            listen: None,
            cors_origins: Vec::new(),
            timeout: DEFAULT_TIMEOUT,
            max_body: DEFAULT_MAX_BODY,
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let trimmed = trimmed.strip_prefix("export ").unwrap_or(trimmed);
            let malformed = |reason: String| RouteError::Malformed { line, reason };
            let (key, value) =
                trimmed.split_once('=').ok_or_else(|| malformed(format!("expected KEY=VALUE, found `{trimmed}`")))?;
            let (key, value) = (key.trim(), unquote(value));
            if let Some(name) = key.strip_prefix("SERVICE_") {
                if name.is_empty() || !name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-') {
                    return Err(malformed(format!("invalid service name `{name}`")));
                }
                if !valid_address(value) {
                    return Err(malformed(format!("invalid address `{value}` for {key}")));
                }
                let prefix = name.to_ascii_lowercase();
                if let Some(prev) = entries.get(&prefix) {
                    return Err(RouteError::DuplicatePrefix { prefix, first: prev.line, second: line });
                }
                entries.insert(prefix, Route { address: value.trim_end_matches('/').to_string(), line });
                continue;
            }
            match key {
                "GATEWAY_LISTEN" => cfg.listen = Some(value.to_string()),
                "GATEWAY_CORS_ORIGINS" => {
                    cfg.cors_origins = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
                }
                "GATEWAY_TIMEOUT_SECS" => {
                    let secs: f64 = value.parse().map_err(|_| malformed(format!("invalid timeout `{value}`")))?;
                    if !(secs.is_finite() && secs > 0.0) {
                        return Err(malformed(format!("invalid timeout `{value}`")));
                    }
                    cfg.timeout = Duration::from_secs_f64(secs);
                }
                "GATEWAY_MAX_BODY_BYTES" => {
                    cfg.max_body = value.parse().map_err(|_| malformed(format!("invalid body limit `{value}`")))?
                }
                _ => {}
            }
        }
        cfg.routes.entries = entries;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RouteError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RouteError::Unreadable { path: path.to_path_buf(), message: e.to_string() })?;
        let mut cfg = Self::parse(&text)?;
        cfg.routes.loaded_from = Some(path.to_path_buf());
        Ok(cfg)
    }
}

pub struct Gateway {
    routes: RouteTable,
    client: reqwest::Client,
    max_body: usize,
}

/// Headers that describe a single connection rather than the message.
const HOP_BY_HOP: [&str; 8] =
    ["connection", "keep-alive", "proxy-authenticate", "proxy-authorization", "te", "trailer", "transfer-encoding", "upgrade"];

fn relayable(name: &HeaderName) -> bool {
    let n = name.as_str();
    !HOP_BY_HOP.contains(&n) && n != "host" && n != "content-length" && n != USER_HEADER
}

fn is_public(prefix: &str, rest: &str, method: &Method) -> bool {
    prefix == "auth" && matches!(rest, "signup" | "signin") && method == Method::POST
}

impl Gateway {
    pub fn new(config: &GatewayConfig) -> Arc<Self> {
        let client = reqwest::Client::builder().timeout(config.timeout).build().expect("http client");
        Arc::new(Gateway { routes: config.routes.clone(), client, max_body: config.max_body })
    }

    pub fn routes(&self) -> &RouteTable {
        &self.routes
    }

    async fn verify(&self, headers: &HeaderMap) -> Result<String, ApiError> {
        let auth = headers
            .get(header::AUTHORIZATION)
            .filter(|v| v.to_str().is_ok_and(|s| s.starts_with("Bearer ")))
            .ok_or(ApiError::Unauthorized)?;
        let base = self.routes.address("auth").ok_or_else(|| ApiError::BadGateway("no auth route configured".into()))?;
        let resp = self
            .client
            .get(format!("{base}/auth/verify"))
            .header(header::AUTHORIZATION, auth.clone())
            .send()
            .await
            .map_err(|e| upstream_error("auth", e))?;
        match resp.status() {
            StatusCode::OK => {
                let body: Value = resp.json().await.map_err(|e| ApiError::BadGateway(format!("auth: {e}")))?;
                body["user_id"].as_str().map(String::from).ok_or_else(|| ApiError::BadGateway("auth: no user id".into()))
            }
            StatusCode::UNAUTHORIZED => Err(ApiError::Unauthorized),
            s => Err(ApiError::BadGateway(format!("auth verification answered {s}"))),
        }
    }

    async fn forward(&self, req: Request) -> Result<Response, ApiError> {
        let path = req.uri().path().to_string();
        let tail = path.strip_prefix("/api/").ok_or_else(|| ApiError::not_found(format!("no route for {path}")))?;
        let (prefix, rest) = tail.split_once('/').unwrap_or((tail, ""));
        let base = self.routes.address(prefix).ok_or_else(|| ApiError::not_found(format!("unknown service `{prefix}`")))?;
        if rest == "internal" || rest.starts_with("internal/") {
            return Err(ApiError::not_found(format!("no route for {path}")));
        }
        let user = if is_public(prefix, rest, req.method()) { None } else { Some(self.verify(req.headers()).await?) };

        let mut url = format!("{base}/{prefix}/{rest}");
        if let Some(q) = req.uri().query() {
            url.push('?');
            url.push_str(q);
        }
        let (parts, body) = req.into_parts();
        let body = to_bytes(body, self.max_body).await.map_err(|_| ApiError::PayloadTooLarge(self.max_body))?;
        let mut headers = reqwest::header::HeaderMap::new();
        for (name, value) in parts.headers.iter().filter(|(n, _)| relayable(n)) {
            headers.append(name.clone(), value.clone());
        }
        if let Some(user) = user {
            let v = HeaderValue::from_str(&user).map_err(|_| ApiError::BadGateway("auth: malformed user id".into()))?;
            headers.insert(USER_HEADER, v);
        }
        let upstream = self
            .client
            .request(parts.method, &url)
            .headers(headers)
            .body(body)
            .send()
            .await
            .map_err(|e| upstream_error(prefix, e))?;

        let status = upstream.status();
        let mut out_headers = HeaderMap::new();
        for (name, value) in upstream.headers().iter().filter(|(n, _)| relayable(n)) {
            out_headers.append(name.clone(), value.clone());
        }
        let bytes = upstream.bytes().await.map_err(|e| upstream_error(prefix, e))?;
        let mut resp = Response::new(Body::from(bytes));
        *resp.status_mut() = status;
        *resp.headers_mut() = out_headers;
        Ok(resp)
    }
}

fn upstream_error(prefix: &str, e: reqwest::Error) -> ApiError {
    if e.is_timeout() {
        ApiError::GatewayTimeout(format!("service `{prefix}` timed out"))
    } else {
        ApiError::BadGateway(format!("service `{prefix}` unreachable: {e}"))
    }
}

async fn forward(State(gw): State<Arc<Gateway>>, req: Request) -> Response {
    match gw.forward(req).await {
        Ok(r) => r,
        Err(e) => e.into_response(),
    }
}

pub fn router(gw: Arc<Gateway>, cors_origins: &[String]) -> Router {
    let router =
        Router::new().route("/api/*path", any(forward)).fallback(|| async { ApiError::not_found("not found") }).with_state(gw);
    let origins: Vec<HeaderValue> = cors_origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
    if origins.is_empty() {
        return router;
    }
    router.layer(
        CorsLayer::new()
            .allow_origin(AllowOrigin::list(origins))
            .allow_methods([Method::GET, Method::POST, Method::PUT, Method::DELETE, Method::OPTIONS])
            .allow_headers([header::AUTHORIZATION, header::CONTENT_TYPE]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_routes_and_settings() {
        let cfg = GatewayConfig::parse(
            "# services\nSERVICE_RMS=http://127.0.0.1:7002\n\nSERVICE_Auth=\"http://127.0.0.1:7001/\"\nGATEWAY_CORS_ORIGINS=http://localhost:5173, http://x\nGATEWAY_TIMEOUT_SECS=0.5\nOTHER=1\n",
        )
        .unwrap();
        assert_eq!(cfg.routes.address("rms"), Some("http://127.0.0.1:7002"));
        assert_eq!(cfg.routes.address("auth"), Some("http://127.0.0.1:7001"));
        assert_eq!(cfg.routes.entries["rms"].line, 2);
        assert_eq!(cfg.cors_origins, ["http://localhost:5173", "http://x"]);
        assert_eq!(cfg.timeout, Duration::from_millis(500));
    }

    #[test]
    fn duplicate_prefix_names_both_lines() {
        let err = GatewayConfig::parse("SERVICE_RMS=http://a:1\n# x\nSERVICE_rms=http://b:2\n").unwrap_err();
        assert_eq!(err, RouteError::DuplicatePrefix { prefix: "rms".into(), first: 1, second: 3 });
        assert_eq!(err.to_string(), "duplicate prefix `rms` on lines 1 and 3");
    }

    #[test]
    fn malformed_lines_are_numbered() {
        let cases = [
            ("SERVICE_RMS=http://a:1\njunk\n", 2),
            ("SERVICE_=http://a:1\n", 1),
            ("\n\nSERVICE_X=not a url\n", 3),
            ("SERVICE_X=ftp://a\n", 1),
            ("GATEWAY_TIMEOUT_SECS=-1\n", 1),
        ];
        for (text, line) in cases {
            match GatewayConfig::parse(text) {
                Err(RouteError::Malformed { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn unreadable_file() {
        let err = GatewayConfig::load(Path::new("/nonexistent/gateway.env")).unwrap_err();
        assert!(matches!(err, RouteError::Unreadable { .. }));
    }

    #[test]
    fn public_paths() {
        assert!(is_public("auth", "signup", &Method::POST));
        assert!(is_public("auth", "signin", &Method::POST));
        assert!(!is_public("auth", "verify", &Method::GET));
        assert!(!is_public("rms", "signin", &Method::POST));
    }
}
