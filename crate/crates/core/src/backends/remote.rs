use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{
    copy_results, next_log, Backend, BackendDescriptor, BackendError, CapacityGate,
    ExperimentBundle, SessionHandle,
};
use crate::executor::{collect_results, prepare_workspace, ExecError, Executor, ExperimentWorkspace};
use crate::model::{ActionOutcome, BackendId, BackendKind, Capacity, ExperimentId, Phase, ResultIndex, SystemId};
use crate::storage::{read_sysdef, SystemStorage};

/// Cost model of a simulated remote backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteProvisioningModel {
    #[serde(default)]
    pub provision_delay_s: f64,
    /// Every action takes this many times as long as it would locally.
    #[serde(default = "default_slowdown")]
    pub per_action_slowdown: f64,
    #[serde(default)]
    pub release_delay_s: f64,
    /// Tolerated overshoot of a slowed action beyond `slowdown x duration`.
    #[serde(default = "default_jitter")]
    pub jitter_bound_s: f64,
}

fn default_slowdown() -> f64 {
    1.5
}

fn default_jitter() -> f64 {
    0.05
}

impl Default for RemoteProvisioningModel {
    fn default() -> Self {
        Self {
            provision_delay_s: 0.0,
            per_action_slowdown: default_slowdown(),
            release_delay_s: 0.0,
            jitter_bound_s: default_jitter(),
        }
    }
}

impl RemoteProvisioningModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.per_action_slowdown >= 1.0 && self.per_action_slowdown.is_finite()) {
            return Err(format!("per_action_slowdown must be >= 1, got {}", self.per_action_slowdown));
        }
        for (name, v) in [
            ("provision_delay_s", self.provision_delay_s),
            ("release_delay_s", self.release_delay_s),
            ("jitter_bound_s", self.jitter_bound_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s.max(0.0))
}

/// Adapter to a host that runs containers on the backend's behalf.
/// Hosts are named by opaque handles returned from `provision`.
#[async_trait]
pub trait RemoteTransport: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    /// Allocates a host and stages the bundle on it.
    async fn provision(&self, bundle: &ExperimentBundle) -> Result<String, BackendError>;

    /// Runs an action on the host and copies its log to `log_dest`.
    async fn execute(
        &self,
        host: &str,
        experiment: &ExperimentId,
        action: Phase,
        timeout: Duration,
        log_dest: &Path,
    ) -> Result<ActionOutcome, BackendError>;

    /// Downloads present results into `dest`.
    async fn fetch_results(&self, host: &str, dest: &Path) -> Result<ResultIndex, BackendError>;

    /// Releases compute; staged data stays retrievable.
    async fn release(&self, host: &str) -> Result<(), BackendError>;
}

/// Transport whose "remote hosts" are directories under a local root,
/// executed through the local executor.
#[derive(Debug)]
pub struct LoopbackTransport {
    executor: Executor,
    storage: Arc<SystemStorage>,
    root: PathBuf,
}

impl LoopbackTransport {
    pub fn new(executor: Executor, storage: Arc<SystemStorage>, root: PathBuf) -> Self {
        Self { executor, storage, root }
    }

    fn host_dir(&self, host: &str) -> Result<PathBuf, BackendError> {
        let dir = self.root.join(host);
        if host.contains('/') || !dir.is_dir() {
            return Err(BackendError::Transport(format!("unknown host `{host}`")));
        }
        Ok(dir)
    }
}

#[async_trait]
impl RemoteTransport for LoopbackTransport {
    fn name(&self) -> &str {
        "loopback"
    }

    async fn provision(&self, bundle: &ExperimentBundle) -> Result<String, BackendError> {
        let storage = self.storage.clone();
        let bundle = bundle.clone();
        let root = self.root.clone();
        tokio::task::spawn_blocking(move || -> Result<String, BackendError> {
            fs::create_dir_all(&root)?;
            let dir = tempfile::Builder::new()
                .prefix(&format!("{}-", bundle.experiment))
                .tempdir_in(&root)?
                .keep();
            let ws_root = dir.join("ws");
            let source = storage.checkout(&bundle.system, &ws_root.join("repository"))?;
            prepare_workspace(&ws_root, &source, &bundle.syscfg, &bundle.file_inputs)?;
            Ok(dir.file_name().unwrap().to_string_lossy().into_owned())
        })
        .await
        .expect("provision task panicked")
    }

    async fn execute(
        &self,
        host: &str,
        experiment: &ExperimentId,
        action: Phase,
        timeout: Duration,
        log_dest: &Path,
    ) -> Result<ActionOutcome, BackendError> {
        let ws = ExperimentWorkspace::new(self.host_dir(host)?.join("ws")).with_label(experiment.as_str());
        let sysdef = read_sysdef(&ws.repository()).map_err(BackendError::Transport)?;
        let relocate = |mut o: ActionOutcome| -> Result<ActionOutcome, BackendError> {
            fs::copy(&o.log_ref, log_dest)?;
            o.log_ref = log_dest.to_string_lossy().into_owned();
            Ok(o)
        };
        match self.executor.execute_action(&ws, &sysdef, action, timeout).await {
            Ok(o) => relocate(o),
            Err(ExecError::ActionTimeout { outcome }) => Err(ExecError::ActionTimeout {
                outcome: relocate(outcome)?,
            }
            .into()),
            Err(e) => Err(e.into()),
        }
    }

    async fn fetch_results(&self, host: &str, dest: &Path) -> Result<ResultIndex, BackendError> {
        let ws = ExperimentWorkspace::new(self.host_dir(host)?.join("ws"));
        let sysdef = read_sysdef(&ws.repository()).map_err(BackendError::Transport)?;
        Ok(copy_results(&collect_results(&ws, &sysdef), dest)?)
    }

    async fn release(&self, host: &str) -> Result<(), BackendError> {
        self.host_dir(host).map(|_| ())
    }
}

/// Backend that provisions a dedicated host per experiment and applies the
/// configured cost model to every action.
#[derive(Debug)]
pub struct RemoteBackend {
    id: BackendId,
    gate: CapacityGate,
    model: RemoteProvisioningModel,
    transport: Arc<dyn RemoteTransport>,
    released: Mutex<HashSet<String>>,
}

impl RemoteBackend {
    pub fn new(
        id: BackendId,
        capacity: Capacity,
        model: RemoteProvisioningModel,
        transport: Arc<dyn RemoteTransport>,
    ) -> Self {
        Self {
            id,
            gate: CapacityGate::new(capacity),
            model,
            transport,
            released: Mutex::new(HashSet::new()),
        }
    }

    pub fn model(&self) -> &RemoteProvisioningModel {
        &self.model
    }

    /// Pads an action measured at `elapsed` up to `slowdown x elapsed`.
    async fn slow_down(&self, clock: Instant, mut outcome: ActionOutcome) -> ActionOutcome {
        let extra = (self.model.per_action_slowdown - 1.0) * outcome.duration_s;
        tokio::time::sleep(secs(extra)).await;
        outcome.duration_s = clock.elapsed().as_secs_f64();
        outcome
    }
}

#[async_trait]
impl Backend for RemoteBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            id: self.id.clone(),
            kind: BackendKind::Remote,
            capacity: self.gate.capacity(),
            cost_model: format!(
                "remote/{}: slowdown x{}, provision {}s, release {}s",
                self.transport.name(),
                self.model.per_action_slowdown,
                self.model.provision_delay_s,
                self.model.release_delay_s
            ),
        }
    }

    fn accepts(&self, _system: &SystemId, registered: bool) -> bool {
        registered
    }

    async fn prepare(&self, bundle: &ExperimentBundle) -> Result<SessionHandle, BackendError> {
        tokio::time::sleep(secs(self.model.provision_delay_s)).await;
        let host = self.transport.provision(bundle).await?;
        Ok(SessionHandle {
            backend: self.id.clone(),
            experiment: bundle.experiment.clone(),
            scratch_dir: bundle.scratch_dir.clone(),
            location: host,
        })
    }

    async fn execute(
        &self,
        session: &SessionHandle,
        action: Phase,
        timeout: Duration,
    ) -> Result<ActionOutcome, BackendError> {
        let _permit = self.gate.acquire().await;
        let reprovision = self.released.lock().unwrap().remove(&session.location);
        if reprovision {
            tokio::time::sleep(secs(self.model.provision_delay_s)).await;
        }
        let log = next_log(&session.scratch_dir.join("logs"), action)?;
        let clock = Instant::now();
        match self
            .transport
            .execute(&session.location, &session.experiment, action, timeout, &log)
            .await
        {
            Ok(outcome) => Ok(self.slow_down(clock, outcome).await),
            Err(BackendError::Exec(ExecError::ActionTimeout { mut outcome })) => {
                outcome.duration_s = clock.elapsed().as_secs_f64();
                Err(ExecError::ActionTimeout { outcome }.into())
            }
            Err(e) => Err(e),
        }
    }

    async fn fetch_results(&self, session: &SessionHandle) -> Result<ResultIndex, BackendError> {
        self.transport
            .fetch_results(&session.location, &session.scratch_dir.join("results"))
            .await
    }

    async fn teardown(&self, session: &SessionHandle) -> Result<(), BackendError> {
        tokio::time::sleep(secs(self.model.release_delay_s)).await;
        self.transport.release(&session.location).await?;
        self.released.lock().unwrap().insert(session.location.clone());
        Ok(())
    }

    fn gate(&self) -> &CapacityGate {
        &self.gate
    }
}
