//! Compute backends. Every backend implements the same session contract
//! (prepare, execute, fetch results, teardown) so the service can bind each
//! experiment to any of them.

mod cascaded;
mod gate;
mod local;
mod remote;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use cascaded::{CascadeBinding, CascadedBackend};
pub use gate::{CapacityGate, GatePermit};
pub use local::LocalBackend;
pub use remote::{LoopbackTransport, RemoteBackend, RemoteProvisioningModel, RemoteTransport};

use crate::api::SystemSummary;
use crate::executor::{ExecError, Executor};
use crate::model::{
    ActionOutcome, BackendId, BackendKind, Capacity, ExperimentId, ExperimentState, Phase,
    ResultEntry, ResultIndex, SysCfg, SystemId,
};
use crate::storage::{StorageError, SystemStorage};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("provisioning failed: {0}")]
    Provision(String),
    #[error("transport failed: {0}")]
    Transport(String),
    #[error("delegate {url} unreachable: {detail}")]
    DelegateUnreachable { url: String, detail: String },
    #[error("delegate rejected experiment {remote_experiment} ({state:?}): {detail}")]
    DelegateRejected {
        remote_experiment: String,
        state: Option<ExperimentState>,
        detail: String,
    },
    #[error("system {system} is not offered by backend {backend}")]
    SystemNotOffered { system: SystemId, backend: BackendId },
    #[error("no eligible backend: {0}")]
    NoEligibleBackend(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Static description of a backend as listed by `GET /v1/backends`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub id: BackendId,
    pub kind: BackendKind,
    pub capacity: Capacity,
    pub cost_model: String,
}

/// Everything a backend needs to stage one experiment.
#[derive(Clone, Debug)]
pub struct ExperimentBundle {
    pub experiment: ExperimentId,
    pub system: SystemId,
    pub syscfg: SysCfg,
    /// Staged uploads keyed by file parameter; the file name is kept.
    pub file_inputs: IndexMap<String, PathBuf>,
    /// Directory owned by the backend for this experiment.
    pub scratch_dir: PathBuf,
}

/// Handle to a prepared experiment. Serializable so that a restarted
/// service can keep using sessions of `Built` experiments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub backend: BackendId,
    pub experiment: ExperimentId,
    pub scratch_dir: PathBuf,
    /// Backend-specific: workspace path, remote host or delegate experiment id.
    pub location: String,
}

#[async_trait]
pub trait Backend: Send + Sync + fmt::Debug {
    fn descriptor(&self) -> BackendDescriptor;

    /// Whether experiments of `system` may be bound to this backend.
    /// `registered` tells if the system is in the local system storage.
    fn accepts(&self, system: &SystemId, registered: bool) -> bool;

    async fn prepare(&self, bundle: &ExperimentBundle) -> Result<SessionHandle, BackendError>;

    /// Runs one action. Capacity is enforced here.
    async fn execute(
        &self,
        session: &SessionHandle,
        action: Phase,
        timeout: Duration,
    ) -> Result<ActionOutcome, BackendError>;

    /// Indexes declared results. Host paths of present entries are readable
    /// by the caller.
    async fn fetch_results(&self, session: &SessionHandle) -> Result<ResultIndex, BackendError>;

    async fn teardown(&self, session: &SessionHandle) -> Result<(), BackendError>;

    /// Systems reachable only through this backend.
    async fn offered_systems(&self) -> Result<Vec<SystemSummary>, BackendError> {
        Ok(Vec::new())
    }

    fn gate(&self) -> &CapacityGate;
}

/// Static backend registry entry of the service configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub id: BackendId,
    pub kind: BackendKind,
    /// Defaults: the host's parallelism for local, unbounded otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<Capacity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provisioning: Option<RemoteProvisioningModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cascade: Option<CascadeBinding>,
}

impl BackendConfig {
    pub fn effective_capacity(&self) -> Capacity {
        self.capacity.unwrap_or_else(|| match self.kind {
            BackendKind::Local => std::thread::available_parallelism()
                .map(Capacity::Bounded)
                .unwrap_or(Capacity::Unbounded),
            BackendKind::Remote | BackendKind::Cascaded => Capacity::Unbounded,
        })
    }
}

/// Shared services backends are built from.
#[derive(Clone, Debug)]
pub struct BackendContext {
    pub storage: Arc<SystemStorage>,
    pub executor: Executor,
    /// Root for backend-private state such as simulated remote hosts.
    pub state_dir: PathBuf,
}

pub fn build_backend(
    cfg: &BackendConfig,
    ctx: &BackendContext,
) -> Result<Arc<dyn Backend>, String> {
    let capacity = cfg.effective_capacity();
    Ok(match cfg.kind {
        BackendKind::Local => Arc::new(LocalBackend::new(
            cfg.id.clone(),
            capacity,
            ctx.executor.clone(),
            ctx.storage.clone(),
        )),
        BackendKind::Remote => {
            let transport = LoopbackTransport::new(
                ctx.executor.clone(),
                ctx.storage.clone(),
                ctx.state_dir.join("remote").join(cfg.id.as_str()),
            );
            Arc::new(RemoteBackend::new(
                cfg.id.clone(),
                capacity,
                cfg.provisioning.clone().unwrap_or_default(),
                Arc::new(transport),
            ))
        }
        BackendKind::Cascaded => {
            let binding = cfg
                .cascade
                .clone()
                .ok_or_else(|| format!("backend {}: kind cascaded needs a `cascade` binding", cfg.id))?;
            Arc::new(
                CascadedBackend::new(cfg.id.clone(), capacity, binding)
                    .map_err(|e| format!("backend {}: {e}", cfg.id))?,
            )
        }
    })
}

/// A registered backend together with whether it may run the system at hand.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub descriptor: BackendDescriptor,
    pub eligible: bool,
}

/// Picks the backend an experiment is bound to. An explicit choice wins
/// but must be eligible and satisfy the system's required kind; otherwise
/// the configured default is used when eligible, else the first eligible
/// backend in registry order.
pub fn select_backend(
    explicit: Option<&BackendId>,
    required_kind: Option<BackendKind>,
    candidates: &[Candidate],
    default: Option<&BackendId>,
) -> Result<BackendId, BackendError> {
    let fits = |c: &Candidate| c.eligible && required_kind.map_or(true, |k| c.descriptor.kind == k);
    if let Some(id) = explicit {
        let c = candidates
            .iter()
            .find(|c| &c.descriptor.id == id)
            .ok_or_else(|| BackendError::NoEligibleBackend(format!("unknown backend `{id}`")))?;
        if !fits(c) {
            return Err(BackendError::NoEligibleBackend(match required_kind {
                Some(k) if c.descriptor.kind != k => {
                    format!("backend `{id}` is {} but the system requires {k}", c.descriptor.kind)
                }
                _ => format!("backend `{id}` cannot run this system"),
            }));
        }
        return Ok(id.clone());
    }
    let eligible: Vec<&Candidate> = candidates.iter().filter(|c| fits(c)).collect();
    if let Some(d) = default {
        if let Some(c) = eligible.iter().find(|c| &c.descriptor.id == d) {
            return Ok(c.descriptor.id.clone());
        }
    }
    eligible
        .first()
        .map(|c| c.descriptor.id.clone())
        .ok_or_else(|| {
            BackendError::NoEligibleBackend(match required_kind {
                Some(k) => format!("no {k} backend can run this system"),
                None => "no configured backend can run this system".into(),
            })
        })
}

/// Copies present result files into `dest/<key>/<file name>` and returns
/// an index pointing at the copies.
pub(crate) fn copy_results(index: &ResultIndex, dest: &Path) -> std::io::Result<ResultIndex> {
    if dest.exists() {
        std::fs::remove_dir_all(dest)?;
    }
    let mut entries = IndexMap::new();
    for (key, entry) in &index.entries {
        let name = entry
            .host_path
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_else(|| key.into());
        let local = dest.join(key).join(name);
        if entry.present {
            std::fs::create_dir_all(local.parent().unwrap())?;
            std::fs::copy(&entry.host_path, &local)?;
        }
        entries.insert(
            key.clone(),
            ResultEntry {
                host_path: local,
                ..entry.clone()
            },
        );
    }
    Ok(ResultIndex { entries })
}

/// Next free `<dir>/<action>-<n>.log`.
pub(crate) fn next_log(dir: &Path, action: Phase) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut n = 1;
    loop {
        let p = dir.join(format!("{action}-{n}.log"));
        if !p.exists() {
            return Ok(p);
        }
        n += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(id: &str, kind: BackendKind, eligible: bool) -> Candidate {
        Candidate {
            descriptor: BackendDescriptor {
                id: id.into(),
                kind,
                capacity: Capacity::Unbounded,
                cost_model: String::new(),
            },
            eligible,
        }
    }

    fn registry() -> Vec<Candidate> {
        vec![
            cand("local", BackendKind::Local, true),
            cand("cloud-sim", BackendKind::Remote, true),
            cand("vendor", BackendKind::Cascaded, false),
        ]
    }

    #[test]
    fn explicit_choice_wins() {
        let id = BackendId::from("cloud-sim");
        let got = select_backend(Some(&id), None, &registry(), Some(&"local".into())).unwrap();
        assert_eq!(got, id);
    }

    #[test]
    fn default_used_without_selection() {
        let got = select_backend(None, None, &registry(), Some(&"local".into())).unwrap();
        assert_eq!(got.as_str(), "local");
    }

    #[test]
    fn system_constraint_filters_candidates() {
        let mut reg = registry();
        reg[2].eligible = true;
        let got = select_backend(None, Some(BackendKind::Cascaded), &reg, Some(&"local".into()))
            .unwrap();
        assert_eq!(got.as_str(), "vendor");
    }

    #[test]
    fn constraint_without_matching_backend_fails() {
        let reg = vec![cand("local", BackendKind::Local, true)];
        let err = select_backend(None, Some(BackendKind::Cascaded), &reg, None).unwrap_err();
        assert!(matches!(err, BackendError::NoEligibleBackend(_)));
    }

    #[test]
    fn explicit_choice_must_be_eligible() {
        let reg = registry();
        for (id, kind) in [("vendor", None), ("local", Some(BackendKind::Remote)), ("nope", None)] {
            let err = select_backend(Some(&id.into()), kind, &reg, None).unwrap_err();
            assert!(matches!(err, BackendError::NoEligibleBackend(_)), "{id}");
        }
    }

    #[test]
    fn ineligible_default_falls_back_to_first_eligible() {
        let got = select_backend(None, None, &registry(), Some(&"vendor".into())).unwrap();
        assert_eq!(got.as_str(), "local");
    }

    #[test]
    fn backend_config_parses_all_kinds() {
        let text = r#"[
          {"id": "local", "kind": "local", "capacity": 4},
          {"id": "cloud-sim", "kind": "remote", "capacity": "unbounded",
           "provisioning": {"provision_delay_s": 0.5, "per_action_slowdown": 1.5}},
          {"id": "vendor", "kind": "cascaded",
           "cascade": {"remote_base_url": "http://127.0.0.1:9000", "auth_token": "t",
                       "remote_system": {"name": "echo-sim", "version": "1.0"}}}
        ]"#;
        let cfgs: Vec<BackendConfig> = serde_json::from_str(text).unwrap();
        assert_eq!(cfgs[0].effective_capacity(), Capacity::bounded(4).unwrap());
        assert_eq!(cfgs[1].effective_capacity(), Capacity::Unbounded);
        let p = cfgs[1].provisioning.as_ref().unwrap();
        assert_eq!((p.provision_delay_s, p.per_action_slowdown, p.release_delay_s), (0.5, 1.5, 0.0));
        let c = cfgs[2].cascade.as_ref().unwrap();
        assert_eq!(c.remote_system, SystemId::new("echo-sim", "1.0"));
    }
}
