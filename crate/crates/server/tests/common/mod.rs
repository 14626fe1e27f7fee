#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use simhub_core::backends::{Backend, BackendConfig};
use simhub_core::client::EvalApiClient;
use simhub_core::storage::RecordLink;
use simhub_core::api::StateView;
use simhub_core::{ExperimentId, ExperimentState};
use simhub_server::{Server, ServiceConfig};
use simhub_testkit as kit;

pub fn config(data_dir: &Path, systems: &[&str]) -> ServiceConfig {
    let mut cfg = ServiceConfig::new(data_dir);
    cfg.listen = "127.0.0.1:0".parse().unwrap();
    cfg.systems = systems
        .iter()
        .map(|s| RecordLink {
            repo_url: kit::system_repo(s).to_string_lossy().into_owned(),
            revision: None,
        })
        .collect();
    cfg.action_timeout_s = Some(60.0);
    cfg.shutdown_grace_s = Some(5.0);
    cfg
}

pub fn backends(v: serde_json::Value) -> Vec<BackendConfig> {
    serde_json::from_value(v).unwrap()
}

pub async fn start(cfg: ServiceConfig) -> (Server, EvalApiClient) {
    start_with(cfg, Vec::new()).await
}

pub async fn start_with(cfg: ServiceConfig, extra: Vec<Arc<dyn Backend>>) -> (Server, EvalApiClient) {
    let token = cfg.token.clone();
    let server = simhub_server::serve_with(cfg, extra).await.unwrap();
    let client = EvalApiClient::new(&server.url(), token).unwrap();
    (server, client)
}

/// Waits until the experiment leaves `state`.
pub async fn settle(c: &EvalApiClient, id: &ExperimentId, state: ExperimentState) -> StateView {
    c.wait_while(id, state, Some(Instant::now() + Duration::from_secs(60)))
        .await
        .unwrap()
}
