use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;
use qms::rms::models::BUNDLED_CORPUS;
use qms::server::{serve, Platform, PlatformConfig};
use qms_core::{ReferenceLm, TrainingConfig};

/// Runs the auth, rms, dmdgs and docgen services behind the gateway.
#[derive(Debug, Parser)]
#[command(name = "qms-server", version)]
struct Args {
    /// Platform configuration (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Data directory when no configuration file is given
    #[arg(long, default_value = "qms-data")]
    data_dir: PathBuf,
    /// Also serve the bundled reference model over HTTP on this address
    #[arg(long)]
    serve_model: Option<SocketAddr>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env().add_directive("info".parse()?))
        .init();
    let args = Args::parse();
    let config = match &args.config {
        Some(path) => PlatformConfig::load(path)?,
        None => PlatformConfig { data_dir: args.data_dir.clone(), ..PlatformConfig::default() },
    };
    let platform = Platform::start(&config).await?;
    for (name, addr) in &platform.services {
        tracing::info!(service = %name, %addr, "listening");
    }
    println!("gateway listening on {}", platform.gateway_url());

    let _model = match args.serve_model {
        Some(addr) => {
            let (lm, _) = ReferenceLm::train(BUNDLED_CORPUS, &TrainingConfig::default()).map_err(|e| anyhow::anyhow!("{e:?}"))?;
            let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
            println!("reference model listening on http://{}", listener.local_addr()?);
            Some(serve(listener, qms::model_http::router(Arc::new(lm), true)))
        }
        None => None,
    };

    tokio::signal::ctrl_c().await?;
    tracing::info!("shutting down");
    drop(platform);
    Ok(())
}
