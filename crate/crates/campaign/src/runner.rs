use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use simhub_core::api::CreateExperimentRequest;
use simhub_core::client::{ClientError, EvalApiClient};
use simhub_core::{ExperimentId, ExperimentState, Phase};
use tokio::sync::{OwnedSemaphorePermit, Semaphore};
use tokio::task::JoinSet;

use crate::report::{Attempt, CampaignReport, RunOutcome, RunRecord};
use crate::spec::{expand, CampaignSpec, Point, SpecError};

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error("service unreachable: {0}")]
    Unreachable(ClientError),
    #[error("system {0} is not offered by the service")]
    NotListed(simhub_core::SystemId),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("cannot read input {path}: {source}")]
    Input {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("service error: {0}")]
    Api(ClientError),
}

fn classify(e: ClientError) -> CampaignError {
    match e {
        ClientError::Unreachable { .. } => CampaignError::Unreachable(e),
        other => CampaignError::Api(other),
    }
}

#[derive(Debug, Default)]
struct Activity {
    active: AtomicUsize,
    high_water: AtomicUsize,
}

/// A parallelism permit that counts as one active experiment while held.
struct Slot {
    _permit: OwnedSemaphorePermit,
    activity: Arc<Activity>,
}

impl Slot {
    async fn take(gate: &Arc<Semaphore>, activity: &Arc<Activity>) -> Slot {
        let permit = gate.clone().acquire_owned().await.expect("semaphore is never closed");
        let now = activity.active.fetch_add(1, Ordering::SeqCst) + 1;
        activity.high_water.fetch_max(now, Ordering::SeqCst);
        Slot {
            _permit: permit,
            activity: activity.clone(),
        }
    }
}

impl Drop for Slot {
    fn drop(&mut self) {
        self.activity.active.fetch_sub(1, Ordering::SeqCst);
    }
}

type Inputs = Arc<HashMap<PathBuf, Arc<Vec<u8>>>>;

/// Expands `spec` against the system's published interface and drives every
/// point through the full lifecycle on the service behind `client`.
pub async fn run_campaign(client: &EvalApiClient, spec: &CampaignSpec) -> Result<CampaignReport, CampaignError> {
    let systems = client.list_systems().await.map_err(classify)?;
    let iface = systems
        .iter()
        .filter_map(|s| s.interface())
        .find(|i| i.id == spec.system)
        .ok_or_else(|| CampaignError::NotListed(spec.system.clone()))?;
    let points = expand(spec, Some(&iface))?;

    let mut files = HashMap::new();
    for path in points.iter().flat_map(|p| p.inputs.values()) {
        if !files.contains_key(path) {
            let bytes = tokio::fs::read(path).await.map_err(|source| CampaignError::Input {
                path: path.clone(),
                source,
            })?;
            files.insert(path.clone(), Arc::new(bytes));
        }
    }
    let files: Inputs = Arc::new(files);

    let permits = spec.parallelism.limit().unwrap_or(points.len()).max(1);
    let gate = Arc::new(Semaphore::new(permits));
    // The next wave is created and configured while the current one runs.
    let lookahead = Arc::new(Semaphore::new(permits));
    let activity = Arc::new(Activity::default());
    let origin = Instant::now();
    let mut tasks = JoinSet::new();
    for point in points {
        let (client, spec, gate, lookahead, activity, files) = (
            client.clone(),
            spec.clone(),
            gate.clone(),
            lookahead.clone(),
            activity.clone(),
            files.clone(),
        );
        tasks.spawn(async move {
            let staging = lookahead.acquire_owned().await.expect("semaphore is never closed");
            let mut staged = Some((stage(&client, &spec, &point, &files).await, staging));
            let mut submitted_at_s = None;
            let mut attempts = Vec::new();
            let result = loop {
                let slot = Slot::take(&gate, &activity).await;
                submitted_at_s.get_or_insert_with(|| origin.elapsed().as_secs_f64());
                match attempt(&client, &spec, &point, &files, staged.take(), slot).await {
                    Ok(a) => {
                        let ok = a.outcome.succeeded();
                        attempts.push(a);
                        if ok || attempts.len() > spec.retries as usize {
                            break Ok(());
                        }
                    }
                    Err(e) => break Err(e),
                }
            };
            let finished_at_s = origin.elapsed().as_secs_f64();
            let submitted_at_s = submitted_at_s.expect("at least one attempt");
            result?;
            let last = attempts.last().expect("at least one attempt").clone();
            Ok::<_, ClientError>(RunRecord {
                index: point.index,
                coords: point.coords,
                experiment: last.experiment,
                outcome: last.outcome,
                duration_s: last.duration_s,
                submitted_at_s,
                finished_at_s,
                attempts,
            })
        });
    }

    let mut runs = Vec::new();
    while let Some(joined) = tasks.join_next().await {
        match joined.expect("campaign task panicked") {
            Ok(r) => runs.push(r),
            Err(e) => {
                tasks.abort_all();
                return Err(CampaignError::Unreachable(e));
            }
        }
    }
    runs.sort_by_key(|r| r.index);
    Ok(CampaignReport::new(
        spec.system.clone(),
        spec.backend.clone(),
        spec.parallelism,
        runs,
        activity.high_water.load(Ordering::SeqCst),
    ))
}

/// Creates the experiment for `point` and hands it its configuration and
/// input files.
async fn stage(
    client: &EvalApiClient,
    spec: &CampaignSpec,
    point: &Point,
    files: &Inputs,
) -> Result<ExperimentId, (Option<ExperimentId>, ClientError)> {
    let exp = client
        .create_experiment(&CreateExperimentRequest {
            system_name: spec.system.name.clone(),
            system_version: spec.system.version.clone(),
            backend: spec.backend.clone(),
        })
        .await
        .map_err(|e| (None, e))?;
    let id = exp.id;
    let staged = async {
        client.configure(&id, &point.syscfg).await?;
        for (param, path) in &point.inputs {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| param.clone());
            client
                .upload_input(&id, param, &name, files[path].as_ref().clone())
                .await?;
        }
        Ok(())
    };
    match staged.await {
        Ok(()) => Ok(id),
        Err(e) => Err((Some(id), e)),
    }
}

type Staged = Result<ExperimentId, (Option<ExperimentId>, ClientError)>;

/// One pass through build and run, staging a fresh experiment unless one is
/// handed in. Only an unreachable service is returned as an error; everything
/// else becomes the attempt's outcome.
async fn attempt(
    client: &EvalApiClient,
    spec: &CampaignSpec,
    point: &Point,
    files: &Inputs,
    staged: Option<(Staged, OwnedSemaphorePermit)>,
    slot: Slot,
) -> Result<Attempt, ClientError> {
    let deadline = Instant::now() + Duration::from_secs_f64(spec.per_run_timeout_s);
    let (staged, staging) = match staged {
        Some((s, p)) => (s, Some(p)),
        None => (stage(client, spec, point, files).await, None),
    };
    let (experiment, r) = match staged {
        Ok(id) => {
            let r = lifecycle(client, &id, deadline, staging, slot).await;
            (Some(id), r)
        }
        Err((id, e)) => (id, Err(e)),
    };
    let fail = |outcome, detail| Attempt {
        experiment: experiment.clone(),
        outcome,
        duration_s: 0.0,
        detail,
    };
    match r {
        Ok(a) => Ok(a),
        Err(e @ ClientError::Unreachable { .. }) => Err(e),
        Err(ClientError::WaitTimeout { state, .. }) => Ok(fail(
            RunOutcome::TimedOut,
            Some(format!("still {state} after {}s", spec.per_run_timeout_s)),
        )),
        Err(e) => Ok(fail(RunOutcome::Error, Some(e.to_string()))),
    }
}

/// `staging` is held until the build is over so that the next point is only
/// staged while this one runs. `slot` is given back as soon as the run ends.
async fn lifecycle(
    client: &EvalApiClient,
    id: &ExperimentId,
    deadline: Instant,
    staging: Option<OwnedSemaphorePermit>,
    slot: Slot,
) -> Result<Attempt, ClientError> {
    let done = |outcome, duration_s, detail| Attempt {
        experiment: Some(id.clone()),
        outcome,
        duration_s,
        detail,
    };
    client.build(id).await?;
    let built = client.wait_while(id, ExperimentState::Building, Some(deadline)).await?;
    drop(staging);
    if built.state != ExperimentState::Built {
        return Ok(done(RunOutcome::BuildFailed, 0.0, built.detail));
    }
    client.run(id).await?;
    let ran = client.wait_while(id, ExperimentState::Running, Some(deadline)).await?;
    drop(slot);
    let duration = if ran.state == ExperimentState::Finished || ran.state == ExperimentState::RunFailed {
        client
            .experiment(id)
            .await?
            .last_outcome(Phase::Run)
            .map_or(0.0, |o| o.duration_s)
    } else {
        0.0
    };
    Ok(match ran.state {
        ExperimentState::Finished => done(RunOutcome::Finished, duration, None),
        _ => done(RunOutcome::RunFailed, duration, ran.detail),
    })
}
