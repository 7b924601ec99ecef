//! Launches the services and the gateway in one process.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use axum::Router;
use serde::Deserialize;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::auth::{self, AuthConfig, AuthService, Downstream};
use crate::dmdgs::{self, Dmdgs, RmsDirectory};
use crate::docgen::{self, Docgen};
use crate::gateway::{self, Gateway, GatewayConfig};
use crate::rms::models::RegistryFile;
use crate::rms::{self, Rms, RmsConfig};
use crate::store::Store;

pub const SERVICES: [&str; 4] = ["auth", "rms", "dmdgs", "docgen"];

/// Platform settings, read from TOML. Ports set to 0 are chosen by the OS.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatformConfig {
    pub data_dir: PathBuf,
    pub host: String,
    pub ports: Ports,
    pub gateway: GatewaySection,
    pub auth: AuthSection,
    pub rms: RmsSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ports {
    pub gateway: u16,
    pub auth: u16,
    pub rms: u16,
    pub dmdgs: u16,
    pub docgen: u16,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    /// Extra lines appended to the generated route file, e.g. additional
    /// `SERVICE_<NAME>=<address>` entries.
    pub extra_routes: Vec<String>,
    pub cors_origins: Vec<String>,
    pub timeout_secs: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuthSection {
    pub token_ttl_hours: i64,
    pub retry_interval_secs: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmsSection {
    pub workers: usize,
    pub vocabulary: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub models_file: Option<PathBuf>,
    pub model_timeout_secs: u64,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            data_dir: PathBuf::from("qms-data"),
            host: "127.0.0.1".into(),
            ports: Ports::default(),
            gateway: GatewaySection::default(),
            auth: AuthSection::default(),
            rms: RmsSection::default(),
        }
    }
}

impl Default for Ports {
    fn default() -> Self {
        Ports { gateway: 8080, auth: 7001, rms: 7002, dmdgs: 7003, docgen: 7004 }
    }
}

impl Ports {
    pub fn ephemeral() -> Self {
        Ports { gateway: 0, auth: 0, rms: 0, dmdgs: 0, docgen: 0 }
    }

    fn of(&self, service: &str) -> u16 {
        match service {
            "auth" => self.auth,
            "rms" => self.rms,
            "dmdgs" => self.dmdgs,
            "docgen" => self.docgen,
            _ => self.gateway,
        }
    }
}

impl Default for AuthSection {
    fn default() -> Self {
        AuthSection { token_ttl_hours: 24, retry_interval_secs: 30 }
    }
}

impl Default for RmsSection {
    fn default() -> Self {
        RmsSection { workers: 2, vocabulary: None, rules: None, models_file: None, model_timeout_secs: 30 }
    }
}

impl PlatformConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: PlatformConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Everything under `data_dir` on OS-chosen ports.
    pub fn ephemeral(data_dir: impl Into<PathBuf>) -> Self {
        PlatformConfig { data_dir: data_dir.into(), ports: Ports::ephemeral(), ..Default::default() }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut().filter(|p| p.is_relative()) {
                *path = base.join(&*path);
            }
        };
        join(&mut self.rms.vocabulary);
        join(&mut self.rms.rules);
        join(&mut self.rms.models_file);
        if self.data_dir.is_relative() {
            self.data_dir = base.join(&self.data_dir);
        }
    }

    pub fn rms_config(&self) -> anyhow::Result<RmsConfig> {
        let mut cfg = RmsConfig::bundled();
        cfg.workers = self.rms.workers;
        cfg.model_timeout = Duration::from_secs(self.rms.model_timeout_secs);
        if let Some(p) = &self.rms.vocabulary {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            cfg.vocabulary = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        }
        if let Some(p) = &self.rms.rules {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            cfg.rules = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        }
        if let Some(p) = &self.rms.models_file {
            cfg.registry = RegistryFile::load(p)?;
        }
        Ok(cfg)
    }
}

/// Serves `router` on `listener` until the task is aborted.
pub fn serve(listener: TcpListener, router: Router) -> JoinHandle<()> {
    tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router).await {
            tracing::error!("server stopped: {e}");
        }
    })
}

pub async fn bind(host: &str, port: u16) -> anyhow::Result<(TcpListener, SocketAddr)> {
    let listener = TcpListener::bind((host, port)).await.with_context(|| format!("binding {host}:{port}"))?;
    let addr = listener.local_addr()?;
    Ok((listener, addr))
}

/// Starts a gateway from `config` on `listener`.
pub fn spawn_gateway(listener: TcpListener, config: &GatewayConfig) -> JoinHandle<()> {
    serve(listener, gateway::router(Gateway::new(config), &config.cors_origins))
}

/// Route file for services at `addrs`, plus `extra` lines.
pub fn route_file(addrs: &BTreeMap<String, SocketAddr>, extra: &[String]) -> String {
    let mut out = String::from("# Generated at startup; one SERVICE_<NAME>=<address> line per service.\n");
    for (name, addr) in addrs {
        out.push_str(&format!("SERVICE_{}=http://{addr}\n", name.to_ascii_uppercase()));
    }
    for line in extra {
        out.push_str(line);
        out.push('\n');
    }
    out
}

pub struct Platform {
    pub gateway_addr: SocketAddr,
    pub services: BTreeMap<String, SocketAddr>,
    /// Route file the gateway was loaded from.
    pub gateway_env: PathBuf,
    pub auth: Arc<AuthService>,
    pub rms: Arc<Rms>,
    pub dmdgs: Arc<Dmdgs>,
    handles: Vec<JoinHandle<()>>,
    gateway_handle: JoinHandle<()>,
}

impl Platform {
    /// Opens the stores under `data_dir` and starts every service and the
    /// gateway.
    pub async fn start(config: &PlatformConfig) -> anyhow::Result<Platform> {
        let mut listeners = BTreeMap::new();
        let mut addrs = BTreeMap::new();
        for name in SERVICES {
            let (l, addr) = bind(&config.host, config.ports.of(name)).await?;
            listeners.insert(name, l);
            addrs.insert(name.to_string(), addr);
        }
        let url = |name: &str| format!("http://{}", addrs[name]);
        let store = |name: &str| -> anyhow::Result<Store> {
            let dir = config.data_dir.join(name);
            Store::open(&dir).with_context(|| format!("opening store {}", dir.display()))
        };
        let timeout = Duration::from_secs(10);

        let rms = Rms::start(store("rms")?, config.rms_config()?)?;
        let dmdgs = Dmdgs::new(store("dmdgs")?, Box::new(RmsDirectory::new(&url("rms"), timeout)));
        let docgen = Docgen::new(&url("rms"), &url("dmdgs"), Duration::from_secs(60));
        let auth_config = AuthConfig {
            token_ttl: chrono::Duration::hours(config.auth.token_ttl_hours),
            downstream: ["rms", "dmdgs"].iter().map(|n| Downstream { name: n.to_string(), base_url: url(n) }).collect(),
            request_timeout: timeout,
        };
        let auth = Arc::new(AuthService::new(store("auth")?, auth_config).map_err(|e| anyhow::anyhow!("{e:?}"))?);

        let mut handles = vec![auth::spawn_retry_loop(auth.clone(), Duration::from_secs(config.auth.retry_interval_secs.max(1)))];
        let mut take = |name: &str| listeners.remove(name).expect("listener bound above");
        handles.push(serve(take("auth"), auth::router(auth.clone())));
        handles.push(serve(take("rms"), rms::router(rms.clone())));
        handles.push(serve(take("dmdgs"), dmdgs::router(dmdgs.clone())));
        handles.push(serve(take("docgen"), docgen::router(docgen)));

        let gateway_env = config.data_dir.join("gateway.env");
        let mut env = route_file(&addrs, &config.gateway.extra_routes);
        if !config.gateway.cors_origins.is_empty() {
            env.push_str(&format!("GATEWAY_CORS_ORIGINS={}\n", config.gateway.cors_origins.join(",")));
        }
        if let Some(t) = config.gateway.timeout_secs {
            env.push_str(&format!("GATEWAY_TIMEOUT_SECS={t}\n"));
        }
        std::fs::create_dir_all(&config.data_dir)?;
        std::fs::write(&gateway_env, env)?;
        let gw_config = GatewayConfig::load(&gateway_env)?;
        let (gl, gateway_addr) = bind(&config.host, config.ports.gateway).await?;
        let gateway_handle = spawn_gateway(gl, &gw_config);
        tracing::info!(%gateway_addr, "platform started");
        Ok(Platform { gateway_addr, services: addrs, gateway_env, auth, rms, dmdgs, handles, gateway_handle })
    }

    pub fn gateway_url(&self) -> String {
        format!("http://{}", self.gateway_addr)
    }

    /// Stops the gateway and starts a fresh one from the same route file on
    /// the same address.
    pub async fn restart_gateway(&mut self) -> anyhow::Result<()> {
        self.gateway_handle.abort();
        let _ = (&mut self.gateway_handle).await;
        let cfg = GatewayConfig::load(&self.gateway_env)?;
        let listener = TcpListener::bind(self.gateway_addr).await?;
        self.gateway_handle = spawn_gateway(listener, &cfg);
        Ok(())
    }
}

impl Drop for Platform {
    fn drop(&mut self) {
        self.gateway_handle.abort();
        for h in &self.handles {
            h.abort();
        }
    }
}
