//! The runtime manager: owns experiment records and dispatches their
//! actions to the bound backends.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::http::StatusCode;
use chrono::Utc;
use indexmap::IndexMap;
use simhub_core::api::{
    BackendView, CreateExperimentRequest, ExperimentFilter, ExperimentPage, ExperimentSummary,
    StateView, SystemSummary,
};
use simhub_core::backends::{
    select_backend, Backend, BackendError, Candidate, ExperimentBundle, SessionHandle,
};
use simhub_core::executor::ExecError;
use simhub_core::format::merge_interface;
use simhub_core::storage::SystemStorage;
use simhub_core::{
    parse_syscfg, ActionOutcome, BackendId, Experiment, ExperimentId, ExperimentState,
    LifecycleEvent, Phase, ResultIndex, SystemId, SystemInterface,
};
use tokio::sync::Notify;

use crate::error::ApiError;
use crate::store::{Entry, ExperimentStore};

pub const DEFAULT_PAGE_LIMIT: usize = 100;
pub const MAX_PAGE_LIMIT: usize = 10_000;
/// Upper bound of a single long-poll wait.
pub const MAX_STATE_WAIT: Duration = Duration::from_secs(60);

#[derive(Debug, Default)]
struct InFlight {
    count: AtomicUsize,
    idle: Notify,
}

impl InFlight {
    fn enter(&self) {
        self.count.fetch_add(1, Ordering::SeqCst);
    }

    fn leave(&self) {
        if self.count.fetch_sub(1, Ordering::SeqCst) == 1 {
            self.idle.notify_waiters();
        }
    }
}

#[derive(Debug)]
pub struct Manager {
    store: ExperimentStore,
    storage: Arc<SystemStorage>,
    backends: IndexMap<BackendId, Arc<dyn Backend>>,
    default_backend: Option<BackendId>,
    action_timeout: Duration,
    /// Interfaces of systems offered by cascaded backends.
    remote_systems: Mutex<HashMap<SystemId, SystemInterface>>,
    inflight: InFlight,
}

impl Manager {
    pub fn new(
        store: ExperimentStore,
        storage: Arc<SystemStorage>,
        backends: Vec<Arc<dyn Backend>>,
        default_backend: Option<BackendId>,
        action_timeout: Duration,
    ) -> Self {
        Self {
            store,
            storage,
            backends: backends
                .into_iter()
                .map(|b| (b.descriptor().id, b))
                .collect(),
            default_backend,
            action_timeout,
            remote_systems: Mutex::new(HashMap::new()),
            inflight: InFlight::default(),
        }
    }

    pub fn store(&self) -> &ExperimentStore {
        &self.store
    }

    pub fn storage(&self) -> &Arc<SystemStorage> {
        &self.storage
    }

    pub fn backend(&self, id: &BackendId) -> Option<&Arc<dyn Backend>> {
        self.backends.get(id)
    }

    fn entry(&self, id: &str) -> Result<Arc<Entry>, ApiError> {
        self.store
            .get(&ExperimentId::from(id))
            .ok_or_else(|| ApiError::unknown_experiment(id))
    }

    fn effective_default(&self) -> Option<&BackendId> {
        self.default_backend
            .as_ref()
            .or_else(|| self.backends.keys().next())
    }

    /// Number of actions currently executing or queued on a backend.
    pub fn actions_in_flight(&self) -> usize {
        self.inflight.count.load(Ordering::SeqCst)
    }

    /// Waits until no action is in flight or the deadline passes.
    pub async fn drain(&self, grace: Duration) -> bool {
        let deadline = tokio::time::Instant::now() + grace;
        loop {
            let idle = self.inflight.idle.notified();
            if self.actions_in_flight() == 0 {
                return true;
            }
            if tokio::time::timeout_at(deadline, idle).await.is_err() {
                return self.actions_in_flight() == 0;
            }
        }
    }

    // ---- systems ---------------------------------------------------------

    pub async fn list_systems(&self) -> Vec<SystemSummary> {
        let mut out: Vec<SystemSummary> = self
            .storage
            .list_systems()
            .into_iter()
            .map(|e| {
                let mut s = match &e.sysdef {
                    Some(def) => {
                        let mut s = SystemSummary::from_interface(&def.interface());
                        s.image = Some(def.image.clone());
                        s
                    }
                    None => SystemSummary::default(),
                };
                s.repo_url = Some(e.repo_url);
                s.revision = e.revision;
                s.error = e.error;
                s
            })
            .collect();
        for (id, backend) in &self.backends {
            match backend.offered_systems().await {
                Ok(list) => {
                    let mut cache = self.remote_systems.lock().unwrap();
                    for s in list {
                        if let Some(iface) = s.interface() {
                            cache.insert(iface.id.clone(), iface);
                        }
                        out.push(s);
                    }
                }
                Err(e) => out.push(SystemSummary {
                    offered_by: Some(id.clone()),
                    error: Some(e.to_string()),
                    ..Default::default()
                }),
            }
        }
        out
    }

    /// The parameter interface of a system and whether it is registered locally.
    async fn resolve_system(&self, id: &SystemId) -> Option<(SystemInterface, bool)> {
        if let Some(def) = self.storage.sysdef(id) {
            return Some((def.interface(), true));
        }
        if let Some(iface) = self.remote_systems.lock().unwrap().get(id) {
            return Some((iface.clone(), false));
        }
        for backend in self.backends.values().filter(|b| b.accepts(id, false)) {
            if let Ok(list) = backend.offered_systems().await {
                let mut cache = self.remote_systems.lock().unwrap();
                for iface in list.iter().filter_map(SystemSummary::interface) {
                    cache.insert(iface.id.clone(), iface);
                }
            }
        }
        let found = self.remote_systems.lock().unwrap().get(id).cloned();
        found.map(|iface| (iface, false))
    }

    pub fn list_backends(&self) -> Vec<BackendView> {
        let default = self.effective_default();
        self.backends
            .values()
            .map(|b| {
                let d = b.descriptor();
                BackendView {
                    default: Some(&d.id) == default,
                    id: d.id,
                    kind: d.kind,
                    capacity: d.capacity,
                    cost_model: d.cost_model,
                }
            })
            .collect()
    }

    // ---- experiments -----------------------------------------------------

    pub async fn create(&self, req: CreateExperimentRequest) -> Result<Experiment, ApiError> {
        let system = SystemId::new(req.system_name, req.system_version);
        let (iface, registered) = self.resolve_system(&system).await.ok_or_else(|| {
            ApiError::new(StatusCode::NOT_FOUND, "UnknownSystem", format!("unknown system {system}"))
        })?;
        let candidates: Vec<Candidate> = self
            .backends
            .values()
            .map(|b| Candidate {
                descriptor: b.descriptor(),
                eligible: b.accepts(&system, registered),
            })
            .collect();
        let backend = select_backend(
            req.backend.as_ref(),
            iface.required_backend_kind,
            &candidates,
            self.effective_default(),
        )
        .map_err(|e| ApiError::new(StatusCode::CONFLICT, "NoEligibleBackend", e.to_string()))?;
        let entry = self
            .store
            .create(|id| Experiment::new(id, system, backend, Utc::now()))?;
        Ok((*entry.snapshot()).clone())
    }

    pub fn get(&self, id: &str) -> Result<Experiment, ApiError> {
        Ok((*self.entry(id)?.snapshot()).clone())
    }

    pub fn list(&self, filter: &ExperimentFilter) -> ExperimentPage {
        let offset = filter.offset.unwrap_or(0);
        let limit = filter.limit.unwrap_or(DEFAULT_PAGE_LIMIT).min(MAX_PAGE_LIMIT);
        let matching: Vec<Arc<Experiment>> = self
            .store
            .all()
            .into_iter()
            .map(|e| e.snapshot())
            .filter(|e| {
                filter.state.map_or(true, |s| e.state == s)
                    && filter.system_name.as_ref().map_or(true, |n| &e.system.name == n)
                    && filter.system_version.as_ref().map_or(true, |v| &e.system.version == v)
                    && filter.backend.as_ref().map_or(true, |b| &e.backend == b)
            })
            .collect();
        let items = matching
            .iter()
            .skip(offset)
            .take(limit)
            .map(|e| ExperimentSummary {
                id: e.id.clone(),
                system: e.system.clone(),
                backend: e.backend.clone(),
                state: e.state,
                created_at: e.created_at,
                updated_at: e.updated_at,
            })
            .collect();
        ExperimentPage {
            items,
            total: matching.len(),
            offset,
            limit,
        }
    }

    pub async fn configure(&self, id: &str, body: &str) -> Result<Experiment, ApiError> {
        let entry = self.entry(id)?;
        let exp = entry.snapshot();
        simhub_core::transition(exp.state, LifecycleEvent::Configure)?;
        let cfg = parse_syscfg(body)?;
        let (iface, _) = self.resolve_system(&exp.system).await.ok_or_else(|| {
            ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "SystemUnavailable",
                format!("system {} is no longer available", exp.system),
            )
        })?;
        for phase in Phase::ALL {
            merge_interface(&iface, &cfg, phase)?;
        }
        entry
            .update(|r| {
                r.experiment.apply(LifecycleEvent::Configure, Utc::now())?;
                r.experiment.config = cfg;
                Ok::<_, ApiError>(())
            })
            .await?;
        Ok((*entry.snapshot()).clone())
    }

    pub async fn upload_input(
        &self,
        id: &str,
        param: &str,
        filename: &str,
        bytes: &[u8],
    ) -> Result<Experiment, ApiError> {
        let entry = self.entry(id)?;
        let system = entry.snapshot().system.clone();
        let (iface, _) = self.resolve_system(&system).await.ok_or_else(|| {
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "SystemUnavailable", system.to_string())
        })?;
        let is_file = Phase::ALL
            .iter()
            .flat_map(|p| iface.parameters(*p))
            .any(|d| d.key == param && d.is_file);
        if !is_file {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "NotAFileParameter",
                format!("`{param}` is not a file parameter of {system}"),
            ));
        }
        if filename.is_empty()
            || filename.contains(['/', '\\', '\0'])
            || filename == "."
            || filename == ".."
            || filename == simhub_core::executor::SYSCFG_FILE
        {
            return Err(ApiError::bad_request(format!("invalid file name `{filename}`")));
        }
        let dir = upload_dir(&entry, param);
        entry
            .update(|r| {
                if r.experiment.state.is_active() {
                    return Err(ApiError::new(
                        StatusCode::CONFLICT,
                        "ExperimentBusy",
                        format!("cannot stage inputs while {}", r.experiment.state),
                    ));
                }
                if dir.exists() {
                    fs::remove_dir_all(&dir)?;
                }
                fs::create_dir_all(&dir)?;
                fs::write(dir.join(filename), bytes)?;
                r.experiment
                    .staged_inputs
                    .insert(param.to_string(), filename.to_string());
                r.experiment.updated_at = Utc::now();
                Ok(())
            })
            .await?;
        Ok((*entry.snapshot()).clone())
    }

    /// Moves the experiment into Building/Running and executes the action
    /// in the background.
    pub async fn start(self: &Arc<Self>, id: &str, action: Phase) -> Result<StateView, ApiError> {
        let entry = self.entry(id)?;
        let event = match action {
            Phase::Build => LifecycleEvent::StartBuild,
            Phase::Run => LifecycleEvent::StartRun,
        };
        entry
            .update(|r| {
                r.experiment.apply(event, Utc::now())?;
                if action == Phase::Run && r.session.is_none() {
                    return Err(ApiError::new(
                        StatusCode::CONFLICT,
                        "NotBuilt",
                        "no prepared build to run",
                    ));
                }
                Ok(())
            })
            .await?;
        self.inflight.enter();
        let this = self.clone();
        let task_entry = entry.clone();
        tokio::spawn(async move {
            match action {
                Phase::Build => this.drive_build(&task_entry).await,
                Phase::Run => this.drive_run(&task_entry).await,
            }
            this.inflight.leave();
        });
        Ok(state_view(&entry.snapshot()))
    }

    async fn drive_build(&self, entry: &Entry) {
        let record = entry.record().await;
        let exp = &record.experiment;
        let Some(backend) = self.backends.get(&exp.backend).cloned() else {
            let detail = format!("backend {} is not configured", exp.backend);
            self.conclude(entry, Phase::Build, None, None, Some(detail), None).await;
            return;
        };
        if let Some(old) = &record.session {
            if let Err(e) = backend.teardown(old).await {
                tracing::warn!(experiment = %exp.id, "teardown of previous session failed: {e}");
            }
        }
        let bundle = ExperimentBundle {
            experiment: exp.id.clone(),
            system: exp.system.clone(),
            syscfg: exp.config.clone(),
            file_inputs: exp
                .staged_inputs
                .iter()
                .map(|(k, f)| (k.clone(), upload_dir(entry, k).join(f)))
                .collect(),
            scratch_dir: entry.dir.join("backend"),
        };
        let session = match backend.prepare(&bundle).await {
            Ok(s) => s,
            Err(e) => {
                self.conclude(entry, Phase::Build, None, None, Some(e.to_string()), None)
                    .await;
                return;
            }
        };
        let (outcome, detail) = self.execute(&*backend, &session, Phase::Build).await;
        if detail.is_some() {
            let _ = backend.teardown(&session).await;
        }
        self.conclude(entry, Phase::Build, Some(session), outcome, detail, None)
            .await;
    }

    async fn drive_run(&self, entry: &Entry) {
        let record = entry.record().await;
        let exp = &record.experiment;
        let (Some(backend), Some(session)) = (self.backends.get(&exp.backend).cloned(), record.session.clone())
        else {
            let detail = format!("backend {} is not configured", exp.backend);
            self.conclude(entry, Phase::Run, None, None, Some(detail), None).await;
            return;
        };
        let (outcome, mut detail) = self.execute(&*backend, &session, Phase::Run).await;
        let mut results = None;
        if detail.is_none() {
            match backend.fetch_results(&session).await {
                Ok(idx) => results = Some(idx),
                Err(e) => detail = Some(format!("result collection failed: {e}")),
            }
        }
        self.conclude(entry, Phase::Run, Some(session.clone()), outcome, detail, results)
            .await;
        if let Err(e) = backend.teardown(&session).await {
            tracing::warn!(experiment = %entry.id, "teardown failed: {e}");
        }
    }

    /// Runs an action and returns its outcome plus a failure reason, if any.
    async fn execute(
        &self,
        backend: &dyn Backend,
        session: &SessionHandle,
        action: Phase,
    ) -> (Option<ActionOutcome>, Option<String>) {
        let clock = Instant::now();
        match backend.execute(session, action, self.action_timeout).await {
            Ok(o) if o.succeeded() => (Some(o), None),
            Ok(o) => {
                let d = format!("{action} exited with status {}", o.exit_status);
                (Some(o), Some(d))
            }
            Err(BackendError::Exec(ExecError::ActionTimeout { outcome })) => (
                Some(outcome),
                Some(format!(
                    "{action} timed out after {:.1}s",
                    clock.elapsed().as_secs_f64()
                )),
            ),
            Err(e) => (None, Some(e.to_string())),
        }
    }

    /// Records the end of an action and emits the completion event.
    async fn conclude(
        &self,
        entry: &Entry,
        action: Phase,
        session: Option<SessionHandle>,
        outcome: Option<ActionOutcome>,
        detail: Option<String>,
        results: Option<ResultIndex>,
    ) {
        let res = entry
            .update(|r| {
                let now = Utc::now();
                if let Some(o) = outcome {
                    r.experiment.action_log.push(o);
                }
                if session.is_some() {
                    r.session = session;
                }
                let exp = &mut r.experiment;
                let applied = match (action, &detail, results) {
                    (Phase::Build, None, _) => exp.apply(LifecycleEvent::BuildOk, now),
                    (Phase::Build, Some(_), _) => exp.apply(LifecycleEvent::BuildErr, now),
                    (Phase::Run, None, Some(idx)) => exp.finish(idx, now),
                    (Phase::Run, _, _) => exp.apply(LifecycleEvent::RunErr, now),
                };
                applied.map_err(|e| std::io::Error::other(e.to_string()))?;
                exp.detail = detail;
                Ok::<_, std::io::Error>(())
            })
            .await;
        if let Err(e) = res {
            tracing::error!(experiment = %entry.id, "cannot record {action} completion: {e}");
        }
    }

    pub async fn state(
        &self,
        id: &str,
        wait_while: Option<ExperimentState>,
        timeout: Duration,
    ) -> Result<StateView, ApiError> {
        let entry = self.entry(id)?;
        if let Some(state) = wait_while {
            let mut rx = entry.subscribe();
            let _ = tokio::time::timeout(
                timeout.min(MAX_STATE_WAIT),
                rx.wait_for(|e| e.state != state),
            )
            .await;
        }
        Ok(state_view(&entry.snapshot()))
    }

    fn finished(&self, id: &str) -> Result<Arc<Experiment>, ApiError> {
        let exp = self.entry(id)?.snapshot();
        if exp.state != ExperimentState::Finished {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "NotFinished",
                format!("results are available in state Finished, experiment is {}", exp.state),
            ));
        }
        Ok(exp)
    }

    pub fn results(&self, id: &str) -> Result<ResultIndex, ApiError> {
        Ok(self.finished(id)?.results.clone().unwrap_or_default())
    }

    pub async fn result_payload(&self, id: &str, key: &str) -> Result<Vec<u8>, ApiError> {
        let exp = self.finished(id)?;
        let entry = exp
            .results
            .as_ref()
            .and_then(|r| r.entries.get(key))
            .ok_or_else(|| {
                ApiError::new(StatusCode::NOT_FOUND, "UnknownResult", format!("no declared result `{key}`"))
            })?;
        if !entry.present {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "ResultNotPresent",
                format!("result `{key}` was not produced"),
            ));
        }
        Ok(tokio::fs::read(&entry.host_path).await?)
    }

    pub async fn log(&self, id: &str, action: Phase) -> Result<Vec<u8>, ApiError> {
        let exp = self.entry(id)?.snapshot();
        let outcome = exp.last_outcome(action).ok_or_else(|| {
            ApiError::new(StatusCode::NOT_FOUND, "NoLog", format!("no {action} action has completed"))
        })?;
        if outcome.log_ref.is_empty() {
            return Ok(Vec::new());
        }
        Ok(tokio::fs::read(&outcome.log_ref).await?)
    }
}

fn upload_dir(entry: &Entry, param: &str) -> PathBuf {
    entry.dir.join("uploads").join(param)
}

pub fn state_view(e: &Experiment) -> StateView {
    StateView {
        id: e.id.clone(),
        state: e.state,
        detail: e.detail.clone(),
        updated_at: e.updated_at,
    }
}
