use std::fs;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{next_log, Backend, BackendDescriptor, BackendError, CapacityGate, ExperimentBundle, SessionHandle};
use crate::api::{CreateExperimentRequest, SystemSummary};
use crate::client::{Backoff, ClientError, EvalApiClient};
use crate::executor::{ExecError, TIMEOUT_EXIT_STATUS};
use crate::model::{
    ActionOutcome, BackendId, BackendKind, Capacity, ExperimentId, ExperimentState, Phase,
    ResultEntry, ResultIndex, SystemId,
};

/// Connection of a cascaded backend to its delegate service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeBinding {
    pub remote_base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token: Option<String>,
    pub remote_system: SystemId,
    #[serde(default = "default_poll_initial")]
    pub poll_initial_ms: u64,
    #[serde(default = "default_poll_max")]
    pub poll_max_ms: u64,
}

fn default_poll_initial() -> u64 {
    100
}

fn default_poll_max() -> u64 {
    5000
}

impl CascadeBinding {
    pub fn new(remote_base_url: impl Into<String>, remote_system: SystemId) -> Self {
        Self {
            remote_base_url: remote_base_url.into(),
            auth_token: None,
            remote_system,
            poll_initial_ms: default_poll_initial(),
            poll_max_ms: default_poll_max(),
        }
    }

    fn backoff(&self) -> Backoff {
        Backoff {
            initial: Duration::from_millis(self.poll_initial_ms.max(1)),
            max: Duration::from_millis(self.poll_max_ms.max(self.poll_initial_ms).max(1)),
        }
    }
}

/// Delegates every experiment to another service through its EvalAPI.
/// Nothing of the system is fetched locally; only result payloads and logs
/// travel back.
#[derive(Debug)]
pub struct CascadedBackend {
    id: BackendId,
    gate: CapacityGate,
    binding: CascadeBinding,
    client: EvalApiClient,
}

impl CascadedBackend {
    pub fn new(id: BackendId, capacity: Capacity, binding: CascadeBinding) -> Result<Self, String> {
        let client = EvalApiClient::new(&binding.remote_base_url, binding.auth_token.clone())
            .map_err(|e| format!("invalid remote_base_url `{}`: {e}", binding.remote_base_url))?;
        Ok(Self {
            id,
            gate: CapacityGate::new(capacity),
            binding,
            client,
        })
    }

    pub fn binding(&self) -> &CascadeBinding {
        &self.binding
    }

    fn map_err(&self, remote: Option<&ExperimentId>, e: ClientError) -> BackendError {
        match e {
            ClientError::Unreachable { detail, .. } => BackendError::DelegateUnreachable {
                url: self.binding.remote_base_url.clone(),
                detail,
            },
            ClientError::Api { body, .. } => BackendError::DelegateRejected {
                remote_experiment: remote.map(|r| r.to_string()).unwrap_or_default(),
                state: None,
                detail: format!("{}: {}", body.error, body.detail),
            },
            other => BackendError::DelegateRejected {
                remote_experiment: remote.map(|r| r.to_string()).unwrap_or_default(),
                state: None,
                detail: other.to_string(),
            },
        }
    }

    async fn offered(&self) -> Result<SystemSummary, BackendError> {
        let systems = self
            .client
            .list_systems()
            .await
            .map_err(|e| self.map_err(None, e))?;
        systems
            .into_iter()
            .find(|s| s.error.is_none() && s.id().as_ref() == Some(&self.binding.remote_system))
            .ok_or_else(|| BackendError::SystemNotOffered {
                system: self.binding.remote_system.clone(),
                backend: self.id.clone(),
            })
    }

    async fn download_log(&self, remote: &ExperimentId, session: &SessionHandle, action: Phase) -> String {
        let path = match next_log(&session.scratch_dir.join("logs"), action) {
            Ok(p) => p,
            Err(_) => return String::new(),
        };
        let bytes = self.client.log(remote, action).await.unwrap_or_default();
        match fs::write(&path, bytes) {
            Ok(()) => path.to_string_lossy().into_owned(),
            Err(_) => String::new(),
        }
    }
}

#[async_trait]
impl Backend for CascadedBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            id: self.id.clone(),
            kind: BackendKind::Cascaded,
            capacity: self.gate.capacity(),
            cost_model: format!("cascade: {} via {}", self.binding.remote_system, self.binding.remote_base_url),
        }
    }

    fn accepts(&self, system: &SystemId, _registered: bool) -> bool {
        system == &self.binding.remote_system
    }

    async fn prepare(&self, bundle: &ExperimentBundle) -> Result<SessionHandle, BackendError> {
        if bundle.system != self.binding.remote_system {
            return Err(BackendError::SystemNotOffered {
                system: bundle.system.clone(),
                backend: self.id.clone(),
            });
        }
        self.offered().await?;
        let remote = self
            .client
            .create_experiment(&CreateExperimentRequest {
                system_name: bundle.system.name.clone(),
                system_version: bundle.system.version.clone(),
                backend: None,
            })
            .await
            .map_err(|e| self.map_err(None, e))?
            .id;
        for (param, path) in &bundle.file_inputs {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| param.clone());
            let bytes = tokio::fs::read(path).await?;
            self.client
                .upload_input(&remote, param, &name, bytes)
                .await
                .map_err(|e| self.map_err(Some(&remote), e))?;
        }
        self.client
            .configure(&remote, &bundle.syscfg)
            .await
            .map_err(|e| self.map_err(Some(&remote), e))?;
        Ok(SessionHandle {
            backend: self.id.clone(),
            experiment: bundle.experiment.clone(),
            scratch_dir: bundle.scratch_dir.clone(),
            location: remote.to_string(),
        })
    }

    async fn execute(
        &self,
        session: &SessionHandle,
        action: Phase,
        timeout: Duration,
    ) -> Result<ActionOutcome, BackendError> {
        let _permit = self.gate.acquire().await;
        let remote = ExperimentId::from(session.location.as_str());
        let active = match action {
            Phase::Build => ExperimentState::Building,
            Phase::Run => ExperimentState::Running,
        };
        let before = self
            .client
            .experiment(&remote)
            .await
            .map_err(|e| self.map_err(Some(&remote), e))?
            .action_log
            .len();
        let started = Instant::now();
        self.client
            .start(&remote, action)
            .await
            .map_err(|e| self.map_err(Some(&remote), e))?;
        let waited = self
            .client
            .poll_while(&remote, active, self.binding.backoff(), Some(started + timeout))
            .await;
        let view = match waited {
            Ok(v) => v,
            Err(ClientError::WaitTimeout { .. }) => {
                let log_ref = self.download_log(&remote, session, action).await;
                return Err(ExecError::ActionTimeout {
                    outcome: ActionOutcome {
                        action,
                        exit_status: TIMEOUT_EXIT_STATUS,
                        duration_s: started.elapsed().as_secs_f64(),
                        log_ref,
                        started_at: chrono::Utc::now()
                            - chrono::Duration::from_std(started.elapsed()).unwrap_or_default(),
                    },
                }
                .into());
            }
            Err(e) => return Err(self.map_err(Some(&remote), e)),
        };
        let exp = self
            .client
            .experiment(&remote)
            .await
            .map_err(|e| self.map_err(Some(&remote), e))?;
        let log_ref = self.download_log(&remote, session, action).await;
        let fresh = exp.action_log.get(before..).unwrap_or_default();
        match fresh.iter().rev().find(|o| o.action == action) {
            Some(o) => Ok(ActionOutcome {
                log_ref,
                ..o.clone()
            }),
            _ => Err(BackendError::DelegateRejected {
                remote_experiment: remote.to_string(),
                state: Some(view.state),
                detail: view.detail.unwrap_or_else(|| "no outcome recorded".into()),
            }),
        }
    }

    async fn fetch_results(&self, session: &SessionHandle) -> Result<ResultIndex, BackendError> {
        let remote = ExperimentId::from(session.location.as_str());
        let index = self
            .client
            .results(&remote)
            .await
            .map_err(|e| self.map_err(Some(&remote), e))?;
        let dest = session.scratch_dir.join("results");
        if dest.exists() {
            fs::remove_dir_all(&dest)?;
        }
        let mut entries = IndexMap::new();
        for (key, entry) in index.entries {
            let name = entry
                .host_path
                .file_name()
                .map(|n| n.to_os_string())
                .unwrap_or_else(|| key.clone().into());
            let local = dest.join(&key).join(name);
            if entry.present {
                let bytes = self
                    .client
                    .result_payload(&remote, &key)
                    .await
                    .map_err(|e| self.map_err(Some(&remote), e))?;
                fs::create_dir_all(local.parent().unwrap())?;
                fs::write(&local, bytes)?;
            }
            entries.insert(
                key,
                ResultEntry {
                    host_path: local,
                    ..entry
                },
            );
        }
        Ok(ResultIndex { entries })
    }

    async fn teardown(&self, _session: &SessionHandle) -> Result<(), BackendError> {
        Ok(())
    }

    async fn offered_systems(&self) -> Result<Vec<SystemSummary>, BackendError> {
        let mut s = self.offered().await?;
        s.offered_by = Some(self.id.clone());
        s.repo_url = None;
        s.revision = None;
        Ok(vec![s])
    }

    fn gate(&self) -> &CapacityGate {
        &self.gate
    }
}
