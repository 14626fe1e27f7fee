//! SysAPI execution: experiment workspace staging, build/run actions inside
//! the system's container image, and collection of declared results.
//!
//! A workspace is a host directory mounted at `/sysapi` with the layout
//!
//! ```text
//! <root>/repository   system checkout, working directory of every action
//! <root>/inputs       syscfg.json and staged file parameters
//! <root>/outputs      recommended location for system output
//! <root>/meta         action logs (private to the runtime manager)
//! ```

mod runtime;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::Utc;
use indexmap::IndexMap;

pub use runtime::{
    ContainerInvocation, ContainerRuntime, DockerRuntime, HostRuntime, RunExit, EXPERIMENT_LABEL,
};

use crate::format::{merge, render_syscfg, FormatError};
use crate::fsutil::copy_tree;
use crate::model::{ActionOutcome, Phase, ResultEntry, ResultIndex, Scalar, SysCfg, SysDef};
use crate::storage::SystemWorkspaceSource;

pub const SYSAPI_MOUNT: &str = "/sysapi";
pub const SYSAPI_REPOSITORY: &str = "/sysapi/repository";
pub const SYSAPI_INPUTS: &str = "/sysapi/inputs";
pub const SYSCFG_FILE: &str = "syscfg.json";

/// Actions without an explicit timeout are killed after one hour.
pub const DEFAULT_ACTION_TIMEOUT: Duration = Duration::from_secs(3600);

/// Exit status recorded for an action killed on timeout.
pub const TIMEOUT_EXIT_STATUS: i32 = 124;

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("`{0}` is not a file parameter of the system")]
    NotAFileParameter(String),
    #[error("staging failed: {0}")]
    Staging(String),
    #[error("configuration rejected: {0}")]
    Config(#[from] FormatError),
    #[error("image `{image}` unavailable: {detail}")]
    ImageUnavailable { image: String, detail: String },
    #[error("{} action timed out after {:.1}s", .outcome.action, .outcome.duration_s)]
    ActionTimeout { outcome: ActionOutcome },
    #[error("container runtime unavailable: {0}")]
    RuntimeUnavailable(String),
    #[error("workspace i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExperimentWorkspace {
    pub root: PathBuf,
    /// Label attached to containers of this workspace.
    pub label: String,
}

impl ExperimentWorkspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        let label = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "workspace".into());
        Self { root, label }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn repository(&self) -> PathBuf {
        self.root.join("repository")
    }

    pub fn inputs(&self) -> PathBuf {
        self.root.join("inputs")
    }

    pub fn outputs(&self) -> PathBuf {
        self.root.join("outputs")
    }

    pub fn meta(&self) -> PathBuf {
        self.root.join("meta")
    }

    pub fn syscfg(&self) -> PathBuf {
        self.inputs().join(SYSCFG_FILE)
    }

    fn is_prepared(&self) -> bool {
        [self.repository(), self.inputs(), self.outputs()]
            .iter()
            .all(|d| d.is_dir())
            && self.syscfg().is_file()
    }
}

/// Stages a workspace under `root`: copies the checkout into
/// `repository/` (unless it was checked out there directly), copies each
/// file input to `inputs/<file name>`, points the corresponding parameter
/// at `/sysapi/inputs/<file name>` and writes the resulting SysCfg to
/// `inputs/syscfg.json`. Returns the workspace and the rewritten SysCfg.
pub fn prepare_workspace(
    root: &Path,
    source: &SystemWorkspaceSource,
    syscfg: &SysCfg,
    file_inputs: &IndexMap<String, PathBuf>,
) -> Result<(ExperimentWorkspace, SysCfg), ExecError> {
    let ws = ExperimentWorkspace::new(root);
    let sysdef = &source.sysdef;

    let mut staged: Vec<(Phase, &str, String, &Path)> = Vec::with_capacity(file_inputs.len());
    for (key, host_file) in file_inputs {
        let phase = Phase::ALL
            .into_iter()
            .find(|p| sysdef.parameter(*p, key).is_some_and(|d| d.is_file))
            .ok_or_else(|| ExecError::NotAFileParameter(key.clone()))?;
        let file_name = host_file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| ExecError::Staging(format!("{} has no file name", host_file.display())))?;
        if file_name == SYSCFG_FILE || staged.iter().any(|(_, _, n, _)| *n == file_name) {
            return Err(ExecError::Staging(format!(
                "input file name `{file_name}` is already taken in inputs/"
            )));
        }
        staged.push((phase, key, file_name, host_file));
    }

    for dir in [ws.inputs(), ws.outputs(), ws.meta()] {
        fs::create_dir_all(dir)?;
    }
    let repo = ws.repository();
    if source.checkout_path != repo {
        if repo.exists() && fs::read_dir(&repo)?.next().is_some() {
            return Err(ExecError::Staging(format!("{} is not empty", repo.display())));
        }
        copy_tree(&source.checkout_path, &repo)?;
    }
    fs::create_dir_all(&repo)?;

    let mut rewritten = syscfg.clone();
    for (phase, key, file_name, host_file) in staged {
        fs::copy(host_file, ws.inputs().join(&file_name)).map_err(|e| {
            ExecError::Staging(format!("cannot stage {}: {e}", host_file.display()))
        })?;
        rewritten.overrides_mut(phase).insert(
            key.to_string(),
            Scalar::Str(format!("{SYSAPI_INPUTS}/{file_name}")),
        );
    }
    for phase in Phase::ALL {
        merge(sysdef, &rewritten, phase)?;
    }
    fs::write(ws.syscfg(), render_syscfg(&rewritten))?;
    Ok((ws, rewritten))
}

/// The container launch for `action` on a prepared workspace.
pub fn invocation(ws: &ExperimentWorkspace, sysdef: &SysDef, action: Phase) -> ContainerInvocation {
    ContainerInvocation {
        image: sysdef.image.clone(),
        volume: ws.root.clone(),
        command: sysdef.command(action).to_string(),
        syscfg_path: format!("{SYSAPI_INPUTS}/{SYSCFG_FILE}"),
        label: ws.label.clone(),
    }
}

fn next_log_path(ws: &ExperimentWorkspace, action: Phase) -> std::io::Result<PathBuf> {
    let meta = ws.meta();
    fs::create_dir_all(&meta)?;
    let prefix = format!("{action}-");
    let n = fs::read_dir(&meta)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with(&prefix))
        .count();
    Ok(meta.join(format!("{action}-{}.log", n + 1)))
}

/// Runs SysAPI actions through a container runtime.
#[derive(Clone, Debug)]
pub struct Executor {
    runtime: Arc<dyn ContainerRuntime>,
}

impl Executor {
    pub fn new(runtime: Arc<dyn ContainerRuntime>) -> Self {
        Self { runtime }
    }

    pub fn runtime(&self) -> &Arc<dyn ContainerRuntime> {
        &self.runtime
    }

    /// Launches one ephemeral container for `action` and waits for it.
    /// A nonzero exit status is a normal outcome; a timeout kills the
    /// container and returns [`ExecError::ActionTimeout`] carrying the
    /// recorded outcome.
    pub async fn execute_action(
        &self,
        ws: &ExperimentWorkspace,
        sysdef: &SysDef,
        action: Phase,
        timeout: Duration,
    ) -> Result<ActionOutcome, ExecError> {
        if !ws.is_prepared() {
            return Err(ExecError::Staging(format!(
                "workspace {} is not prepared",
                ws.root.display()
            )));
        }
        self.runtime.ensure_image(&sysdef.image).await?;
        let inv = invocation(ws, sysdef, action);
        let log_path = next_log_path(ws, action)?;
        let log = fs::File::create(&log_path)?;
        let started_at = Utc::now();
        let clock = Instant::now();
        let exit = self.runtime.run(&inv, log, timeout).await?;
        let duration_s = clock.elapsed().as_secs_f64();
        let outcome = ActionOutcome {
            action,
            exit_status: match exit {
                RunExit::Exited(code) => code,
                RunExit::TimedOut => TIMEOUT_EXIT_STATUS,
            },
            duration_s,
            log_ref: log_path.to_string_lossy().into_owned(),
            started_at,
        };
        tracing::debug!(label = %ws.label, %action, status = outcome.exit_status, duration_s, "action finished");
        match exit {
            RunExit::TimedOut => Err(ExecError::ActionTimeout { outcome }),
            RunExit::Exited(_) => Ok(outcome),
        }
    }
}

/// Indexes the declared results of a run. Paths resolve against
/// `repository/`; missing files are recorded as absent, never as errors.
pub fn collect_results(ws: &ExperimentWorkspace, sysdef: &SysDef) -> ResultIndex {
    let repo = ws.repository();
    let canonical_root = fs::canonicalize(&ws.root).unwrap_or_else(|_| ws.root.clone());
    let entries = sysdef
        .results
        .iter()
        .map(|decl| {
            let host_path = repo.join(&decl.path);
            let mut entry = ResultEntry {
                host_path: host_path.clone(),
                size_bytes: 0,
                kind: decl.kind.clone(),
                present: false,
                error: None,
            };
            match fs::canonicalize(&host_path) {
                Ok(real) if !real.starts_with(&canonical_root) => {
                    entry.error = Some("resolves outside the workspace".into());
                }
                Ok(real) => match fs::metadata(&real) {
                    Ok(md) if md.is_file() => {
                        entry.present = true;
                        entry.size_bytes = md.len();
                    }
                    Ok(_) => entry.error = Some("not a regular file".into()),
                    Err(e) => entry.error = Some(e.to_string()),
                },
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => entry.error = Some(e.to_string()),
            }
            (decl.key.clone(), entry)
        })
        .collect();
    ResultIndex { entries }
}
