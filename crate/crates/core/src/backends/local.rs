use std::fs;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;

use super::{Backend, BackendDescriptor, BackendError, CapacityGate, ExperimentBundle, SessionHandle};
use crate::executor::{collect_results, prepare_workspace, Executor, ExperimentWorkspace};
use crate::model::{ActionOutcome, BackendId, BackendKind, Capacity, Phase, ResultIndex, SystemId};
use crate::storage::{read_sysdef, SystemStorage};

/// Runs actions on this host through the executor. The workspace lives in
/// the experiment's scratch directory and is rebuilt on every prepare.
#[derive(Debug)]
pub struct LocalBackend {
    id: BackendId,
    gate: CapacityGate,
    executor: Executor,
    storage: Arc<SystemStorage>,
}

impl LocalBackend {
    pub fn new(id: BackendId, capacity: Capacity, executor: Executor, storage: Arc<SystemStorage>) -> Self {
        Self {
            id,
            gate: CapacityGate::new(capacity),
            executor,
            storage,
        }
    }

    fn workspace(session: &SessionHandle) -> ExperimentWorkspace {
        ExperimentWorkspace::new(&session.location).with_label(session.experiment.as_str())
    }
}

#[async_trait]
impl Backend for LocalBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            id: self.id.clone(),
            kind: BackendKind::Local,
            capacity: self.gate.capacity(),
            cost_model: format!("local/{}", self.executor.runtime().name()),
        }
    }

    fn accepts(&self, _system: &SystemId, registered: bool) -> bool {
        registered
    }

    async fn prepare(&self, bundle: &ExperimentBundle) -> Result<SessionHandle, BackendError> {
        let root: PathBuf = bundle.scratch_dir.join("workspace");
        let session = SessionHandle {
            backend: self.id.clone(),
            experiment: bundle.experiment.clone(),
            scratch_dir: bundle.scratch_dir.clone(),
            location: root.to_string_lossy().into_owned(),
        };
        let storage = self.storage.clone();
        let bundle = bundle.clone();
        tokio::task::spawn_blocking(move || -> Result<(), BackendError> {
            if root.exists() {
                fs::remove_dir_all(&root)?;
            }
            let source = storage.checkout(&bundle.system, &root.join("repository"))?;
            prepare_workspace(&root, &source, &bundle.syscfg, &bundle.file_inputs)?;
            Ok(())
        })
        .await
        .expect("prepare task panicked")?;
        Ok(session)
    }

    async fn execute(
        &self,
        session: &SessionHandle,
        action: Phase,
        timeout: Duration,
    ) -> Result<ActionOutcome, BackendError> {
        let ws = Self::workspace(session);
        let sysdef = read_sysdef(&ws.repository()).map_err(BackendError::Provision)?;
        let _permit = self.gate.acquire().await;
        Ok(self.executor.execute_action(&ws, &sysdef, action, timeout).await?)
    }

    async fn fetch_results(&self, session: &SessionHandle) -> Result<ResultIndex, BackendError> {
        let ws = Self::workspace(session);
        let sysdef = read_sysdef(&ws.repository()).map_err(BackendError::Provision)?;
        Ok(collect_results(&ws, &sysdef))
    }

    async fn teardown(&self, _session: &SessionHandle) -> Result<(), BackendError> {
        Ok(())
    }

    fn gate(&self) -> &CapacityGate {
        &self.gate
    }
}
