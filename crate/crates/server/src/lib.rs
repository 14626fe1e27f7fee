//! The experiment service: REST API, experiment store and backend dispatch.

pub mod config;
pub mod error;
pub mod http;
pub mod manager;
pub mod store;
pub mod stub;

use std::net::SocketAddr;
use std::sync::Arc;

use simhub_core::backends::{build_backend, Backend, BackendContext};
use simhub_core::executor::{ContainerRuntime, DockerRuntime, Executor, HostRuntime};
use simhub_core::storage::SystemStorage;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub use config::{ConfigError, RuntimeKind, ServiceConfig};
pub use error::ApiError;
pub use manager::Manager;

/// A running service instance.
pub struct Server {
    addr: SocketAddr,
    manager: Arc<Manager>,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
    grace: std::time::Duration,
}

impl Server {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn manager(&self) -> &Arc<Manager> {
        &self.manager
    }

    /// Stops accepting requests and waits for in-flight actions up to the
    /// configured grace period. Returns false if some were still running.
    pub async fn shutdown(mut self) -> bool {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        let drained = self.manager.drain(self.grace).await;
        let _ = (&mut self.task).await;
        drained
    }

    /// Serves until the process receives ctrl-c.
    pub async fn run_until_ctrl_c(self) -> anyhow::Result<()> {
        tokio::signal::ctrl_c().await?;
        tracing::info!("shutting down");
        if !self.shutdown().await {
            tracing::warn!("grace period over with actions still running");
        }
        Ok(())
    }
}

pub async fn serve(cfg: ServiceConfig) -> anyhow::Result<Server> {
    serve_with(cfg, Vec::new()).await
}

/// Like [`serve`], with additional pre-built backends registered after the
/// configured ones.
pub async fn serve_with(cfg: ServiceConfig, extra: Vec<Arc<dyn Backend>>) -> anyhow::Result<Server> {
    let mut checked = cfg.clone();
    checked.default_backend = None;
    checked.validate()?;

    let registry = cfg.registry_path();
    let storage = tokio::task::spawn_blocking(move || SystemStorage::open(registry)).await??;
    for link in &cfg.systems {
        if let Err(e) = storage.register_system(&link.repo_url, link.revision.as_deref()) {
            tracing::warn!(repo = %link.repo_url, "system registration failed: {e}");
        }
    }
    let storage = Arc::new(storage);

    let runtime: Arc<dyn ContainerRuntime> = match cfg.runtime.kind {
        RuntimeKind::Host => Arc::new(HostRuntime::new(
            cfg.runtime.shell.clone().unwrap_or_else(|| "sh".into()),
        )),
        RuntimeKind::Docker => Arc::new(DockerRuntime {
            docker: cfg.runtime.docker.clone().unwrap_or_else(|| "docker".into()),
        }),
    };
    let ctx = BackendContext {
        storage: storage.clone(),
        executor: Executor::new(runtime),
        state_dir: cfg.data_dir.join("backends"),
    };
    let mut backends = Vec::new();
    for b in cfg.effective_backends() {
        backends.push(build_backend(&b, &ctx).map_err(|e| anyhow::anyhow!(e))?);
    }
    backends.extend(extra);
    if let Some(d) = &cfg.default_backend {
        if !backends.iter().any(|b| &b.descriptor().id == d) {
            anyhow::bail!("default_backend `{d}` is not configured");
        }
    }

    let (store, demoted) = store::ExperimentStore::open(cfg.data_dir.join("experiments"))?;
    for id in &demoted {
        tracing::warn!(experiment = %id, "action interrupted by restart");
    }
    let manager = Arc::new(Manager::new(
        store,
        storage,
        backends,
        cfg.default_backend.clone(),
        cfg.action_timeout(),
    ));

    let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
    let addr = listener.local_addr()?;
    let app = http::router(manager.clone(), cfg.token.clone());
    let (stop, stopped) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stopped.await;
            })
            .await
    });
    tracing::info!(%addr, "listening");
    Ok(Server {
        addr,
        manager,
        stop: Some(stop),
        task,
        grace: cfg.shutdown_grace(),
    })
}
