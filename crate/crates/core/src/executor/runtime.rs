//! Container runtimes that execute a SysAPI action.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use tokio::process::Command;

use super::{ExecError, SYSAPI_MOUNT, SYSAPI_REPOSITORY};

/// Label key attached to every container started for an experiment.
pub const EXPERIMENT_LABEL: &str = "simhub.experiment";

/// One ephemeral container launch for a build or run action.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContainerInvocation {
    pub image: String,
    /// Host directory mounted at `/sysapi`.
    pub volume: PathBuf,
    /// `build_command` or `run_command` from the SysDef.
    pub command: String,
    /// In-container path of the SysCfg, appended as last argument.
    pub syscfg_path: String,
    pub label: String,
}

impl ContainerInvocation {
    /// Command and SysCfg path as executed inside the container.
    pub fn action_call(&self) -> String {
        format!("{} {}", self.command, self.syscfg_path)
    }

    /// The invocation in the canonical single-line form
    /// `docker run --rm -v <volume>:/sysapi -w /sysapi/repository <image> <command> <syscfg>`.
    pub fn command_line(&self) -> String {
        format!(
            "docker run --rm -v {}:{SYSAPI_MOUNT} -w {SYSAPI_REPOSITORY} {} {}",
            self.volume.display(),
            self.image,
            self.action_call()
        )
    }

    /// Arguments passed to the docker CLI. The action call goes through
    /// `sh -c` because commands may use shell builtins such as `source`.
    pub fn docker_args(&self, container_name: &str) -> Vec<String> {
        vec![
            "run".into(),
            "--rm".into(),
            "--name".into(),
            container_name.into(),
            "--label".into(),
            format!("{EXPERIMENT_LABEL}={}", self.label),
            "-v".into(),
            format!("{}:{SYSAPI_MOUNT}", self.volume.display()),
            "-w".into(),
            SYSAPI_REPOSITORY.into(),
            self.image.clone(),
            "sh".into(),
            "-c".into(),
            self.action_call(),
        ]
    }

    /// Maps an in-container `/sysapi/...` path onto the mounted host directory.
    pub fn host_path(&self, container_path: &str) -> PathBuf {
        match container_path.strip_prefix(SYSAPI_MOUNT) {
            Some(rest) => self.volume.join(rest.trim_start_matches('/')),
            None => PathBuf::from(container_path),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunExit {
    Exited(i32),
    TimedOut,
}

#[async_trait]
pub trait ContainerRuntime: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Makes `image` available locally, pulling it only if absent.
    async fn ensure_image(&self, image: &str) -> Result<(), ExecError>;

    /// Runs the invocation to completion with stdout and stderr both
    /// written to `log`. The container is gone when this returns.
    async fn run(
        &self,
        invocation: &ContainerInvocation,
        log: File,
        timeout: Duration,
    ) -> Result<RunExit, ExecError>;

    /// Containers currently alive with the given experiment label.
    async fn running_with_label(&self, label: &str) -> Result<Vec<String>, ExecError>;
}

fn exit_code(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .or_else(|| status.signal().map(|s| 128 + s))
        .unwrap_or(-1)
}

/// Runtime backed by the `docker` command line client.
#[derive(Debug, Clone)]
pub struct DockerRuntime {
    pub docker: PathBuf,
}

impl Default for DockerRuntime {
    fn default() -> Self {
        Self {
            docker: "docker".into(),
        }
    }
}

impl DockerRuntime {
    async fn docker(&self, args: &[&str]) -> Result<std::process::Output, ExecError> {
        Command::new(&self.docker)
            .args(args)
            .stdin(Stdio::null())
            .output()
            .await
            .map_err(|e| ExecError::RuntimeUnavailable(format!("{}: {e}", self.docker.display())))
    }
}

#[async_trait]
impl ContainerRuntime for DockerRuntime {
    fn name(&self) -> &'static str {
        "docker"
    }

    async fn ensure_image(&self, image: &str) -> Result<(), ExecError> {
        if self.docker(&["image", "inspect", image]).await?.status.success() {
            return Ok(());
        }
        let pull = self.docker(&["pull", "--quiet", image]).await?;
        if pull.status.success() {
            Ok(())
        } else {
            Err(ExecError::ImageUnavailable {
                image: image.to_string(),
                detail: String::from_utf8_lossy(&pull.stderr).trim().to_string(),
            })
        }
    }

    async fn run(
        &self,
        invocation: &ContainerInvocation,
        log: File,
        timeout: Duration,
    ) -> Result<RunExit, ExecError> {
        let name = container_name(&invocation.label);
        let err_log = log.try_clone()?;
        let mut child = Command::new(&self.docker)
            .args(invocation.docker_args(&name))
            .stdin(Stdio::null())
            .stdout(log)
            .stderr(err_log)
            .kill_on_drop(true)
            .spawn()
            .map_err(|e| ExecError::RuntimeUnavailable(format!("{}: {e}", self.docker.display())))?;
        match tokio::time::timeout(timeout, child.wait()).await {
            Ok(status) => Ok(RunExit::Exited(exit_code(status?))),
            Err(_) => {
                let _ = self.docker(&["rm", "--force", &name]).await;
                let _ = child.kill().await;
                Ok(RunExit::TimedOut)
            }
        }
    }

    async fn running_with_label(&self, label: &str) -> Result<Vec<String>, ExecError> {
        let filter = format!("label={EXPERIMENT_LABEL}={label}");
        let out = self.docker(&["ps", "--all", "--quiet", "--filter", &filter]).await?;
        Ok(String::from_utf8_lossy(&out.stdout)
            .lines()
            .map(str::to_string)
            .collect())
    }
}

fn container_name(label: &str) -> String {
    use std::sync::atomic::{AtomicU64, Ordering};
    static NEXT: AtomicU64 = AtomicU64::new(0);
    let n = NEXT.fetch_add(1, Ordering::Relaxed);
    format!("simhub-{label}-{}-{n}", std::process::id())
}

/// Executes actions as host processes that emulate the container contract:
/// the working directory is the workspace's `repository/`, the SysCfg path
/// argument points at the mounted directory, and `SYSAPI_ROOT` names the
/// host directory standing in for `/sysapi`. The image is not used.
///
/// Each action runs in its own process group, which is killed when the
/// action ends so that nothing outlives it.
#[derive(Debug)]
pub struct HostRuntime {
    pub shell: PathBuf,
    live: Mutex<HashMap<u32, String>>,
}

impl Default for HostRuntime {
    fn default() -> Self {
        Self::new("sh")
    }
}

impl HostRuntime {
    pub fn new(shell: impl Into<PathBuf>) -> Self {
        Self {
            shell: shell.into(),
            live: Mutex::new(HashMap::new()),
        }
    }
}

fn kill_group(pid: u32) {
    // SAFETY: kill(2) with a negative pid signals the process group.
    unsafe {
        libc::kill(-(pid as libc::pid_t), libc::SIGKILL);
    }
}

#[async_trait]
impl ContainerRuntime for HostRuntime {
    fn name(&self) -> &'static str {
        "host"
    }

    async fn ensure_image(&self, _image: &str) -> Result<(), ExecError> {
        Ok(())
    }

    async fn run(
        &self,
        invocation: &ContainerInvocation,
        log: File,
        timeout: Duration,
    ) -> Result<RunExit, ExecError> {
        let workdir = invocation.host_path(SYSAPI_REPOSITORY);
        let syscfg = invocation.host_path(&invocation.syscfg_path);
        let call = format!("{} {}", invocation.command, shell_quote(&syscfg));
        let err_log = log.try_clone()?;
        let mut child = Command::new(&self.shell)
            .arg("-c")
            .arg(call)
            .current_dir(&workdir)
            .env("SYSAPI_ROOT", &invocation.volume)
            .stdin(Stdio::null())
            .stdout(log)
            .stderr(err_log)
            .process_group(0)
            .kill_on_drop(true)
            .spawn()
            .map_err(|e| ExecError::RuntimeUnavailable(format!("{}: {e}", self.shell.display())))?;
        let pid = child.id().expect("freshly spawned child has a pid");
        self.live.lock().unwrap().insert(pid, invocation.label.clone());
        let result = tokio::time::timeout(timeout, child.wait()).await;
        kill_group(pid);
        let exit = match result {
            Ok(status) => RunExit::Exited(exit_code(status?)),
            Err(_) => {
                let _ = child.wait().await;
                RunExit::TimedOut
            }
        };
        self.live.lock().unwrap().remove(&pid);
        Ok(exit)
    }

    async fn running_with_label(&self, label: &str) -> Result<Vec<String>, ExecError> {
        Ok(self
            .live
            .lock()
            .unwrap()
            .iter()
            .filter(|(_, l)| l.as_str() == label)
            .map(|(pid, _)| pid.to_string())
            .collect())
    }
}

fn shell_quote(path: &Path) -> String {
    let s = path.to_string_lossy();
    if s.chars().all(|c| c.is_ascii_alphanumeric() || "/._-".contains(c)) {
        s.into_owned()
    } else {
        format!("'{}'", s.replace('\'', r"'\''"))
    }
}
