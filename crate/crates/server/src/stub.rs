//! A scripted backend for exercising the service without running systems.

use std::collections::HashMap;
use std::fs;
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use chrono::Utc;
use simhub_core::backends::{
    Backend, BackendDescriptor, BackendError, CapacityGate, ExperimentBundle, SessionHandle,
};
use simhub_core::{
    ActionOutcome, BackendId, BackendKind, Capacity, ExperimentId, Phase, ResultEntry, ResultIndex,
    SystemId,
};
use tokio::sync::watch;

/// What an action does when executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Exit(i32),
    /// Blocks until [`ScriptedBackend::release`] is called.
    Hold,
}

#[derive(Debug)]
pub struct ScriptedBackend {
    id: BackendId,
    gate: CapacityGate,
    plans: Mutex<HashMap<(ExperimentId, Phase), Step>>,
    changed: watch::Sender<u64>,
    executed: Mutex<Vec<(ExperimentId, Phase)>>,
}

/// Result key written by every successful stub run.
pub const STUB_RESULT: &str = "out";

impl ScriptedBackend {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: BackendId::new(id),
            gate: CapacityGate::new(Capacity::Unbounded),
            plans: Mutex::new(HashMap::new()),
            changed: watch::channel(0).0,
            executed: Mutex::new(Vec::new()),
        }
    }

    /// Sets the behaviour of the next `action` of `experiment`. Unplanned
    /// actions exit 0.
    pub fn plan(&self, experiment: &ExperimentId, action: Phase, step: Step) {
        self.plans
            .lock()
            .unwrap()
            .insert((experiment.clone(), action), step);
        self.changed.send_modify(|n| *n += 1);
    }

    /// Ends a held action with `code`.
    pub fn release(&self, experiment: &ExperimentId, action: Phase, code: i32) {
        self.plan(experiment, action, Step::Exit(code));
    }

    pub fn executed(&self) -> Vec<(ExperimentId, Phase)> {
        self.executed.lock().unwrap().clone()
    }

    fn step(&self, key: &(ExperimentId, Phase)) -> Step {
        self.plans
            .lock()
            .unwrap()
            .get(key)
            .copied()
            .unwrap_or(Step::Exit(0))
    }
}

#[async_trait]
impl Backend for ScriptedBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            id: self.id.clone(),
            kind: BackendKind::Local,
            capacity: Capacity::Unbounded,
            cost_model: "stub".into(),
        }
    }

    fn accepts(&self, _system: &SystemId, _registered: bool) -> bool {
        true
    }

    async fn prepare(&self, bundle: &ExperimentBundle) -> Result<SessionHandle, BackendError> {
        fs::create_dir_all(&bundle.scratch_dir).map_err(BackendError::Io)?;
        Ok(SessionHandle {
            backend: self.id.clone(),
            experiment: bundle.experiment.clone(),
            scratch_dir: bundle.scratch_dir.clone(),
            location: String::new(),
        })
    }

    async fn execute(
        &self,
        session: &SessionHandle,
        action: Phase,
        _timeout: Duration,
    ) -> Result<ActionOutcome, BackendError> {
        let _permit = self.gate.acquire().await;
        let started_at = Utc::now();
        let key = (session.experiment.clone(), action);
        self.executed.lock().unwrap().push(key.clone());
        let mut rx = self.changed.subscribe();
        let code = loop {
            match self.step(&key) {
                Step::Exit(c) => break c,
                Step::Hold => {
                    let _ = rx.changed().await;
                }
            }
        };
        let log = session.scratch_dir.join(format!("{action}.log"));
        fs::write(&log, format!("stub {action} exit {code}\n")).map_err(BackendError::Io)?;
        Ok(ActionOutcome {
            action,
            exit_status: code,
            duration_s: (Utc::now() - started_at).num_microseconds().unwrap_or(0) as f64 / 1e6,
            log_ref: log.to_string_lossy().into_owned(),
            started_at,
        })
    }

    async fn fetch_results(&self, session: &SessionHandle) -> Result<ResultIndex, BackendError> {
        let path = session.scratch_dir.join("result.txt");
        fs::write(&path, b"stub\n").map_err(BackendError::Io)?;
        let mut idx = ResultIndex::default();
        idx.entries.insert(
            STUB_RESULT.into(),
            ResultEntry {
                host_path: path,
                size_bytes: 5,
                kind: "file".into(),
                present: true,
                error: None,
            },
        );
        Ok(idx)
    }

    async fn teardown(&self, _session: &SessionHandle) -> Result<(), BackendError> {
        Ok(())
    }

    fn gate(&self) -> &CapacityGate {
        &self.gate
    }
}
