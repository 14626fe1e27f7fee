use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use simhub_server::ServiceConfig;

/// Experiment service.
#[derive(Parser, Debug)]
#[command(name = "simhub-server", version)]
struct Args {
    /// Service configuration file (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the listen address.
    #[arg(long)]
    listen: Option<SocketAddr>,
    /// Overrides the data directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .init();
    let args = Args::parse();
    let mut cfg = match &args.config {
        Some(path) => ServiceConfig::load(path)?,
        None => ServiceConfig::new(
            args.data_dir
                .clone()
                .context("either --config or --data-dir is required")?,
        ),
    };
    if let Some(l) = args.listen {
        cfg.listen = l;
    }
    if let Some(d) = args.data_dir {
        cfg.data_dir = d;
    }
    let server = simhub_server::serve(cfg).await?;
    println!("listening on {}", server.url());
    server.run_until_ctrl_c().await
}
