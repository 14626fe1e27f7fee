use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use simhub_core::backends::BackendConfig;
use simhub_core::executor::DEFAULT_ACTION_TIMEOUT;
use simhub_core::storage::RecordLink;
use simhub_core::{BackendId, BackendKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuntimeKind {
    /// Actions run as host processes emulating the container contract.
    Host,
    Docker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub kind: RuntimeKind,
    /// Shell used by the host runtime; `bash` is needed for `source`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shell: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub docker: Option<PathBuf>,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            kind: RuntimeKind::Host,
            shell: None,
            docker: None,
        }
    }
}

/// Service configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    /// Defaults to `<data_dir>/systems.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub systems_registry: Option<PathBuf>,
    /// Repositories registered at startup in addition to the registry file.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub systems: Vec<RecordLink>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_backend: Option<BackendId>,
    #[serde(default)]
    pub runtime: RuntimeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_timeout_s: Option<f64>,
    /// Grace period for in-flight actions on shutdown.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shutdown_grace_s: Option<f64>,
    /// Empty means one local backend named `local`.
    #[serde(default)]
    pub backends: Vec<BackendConfig>,
}

fn default_listen() -> SocketAddr {
    "127.0.0.1:8080".parse().unwrap()
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            listen: default_listen(),
            data_dir: data_dir.into(),
            systems_registry: None,
            systems: Vec::new(),
            token: None,
            default_backend: None,
            runtime: RuntimeConfig::default(),
            action_timeout_s: None,
            shutdown_grace_s: None,
            backends: Vec::new(),
        }
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: ServiceConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data_dir);
        if let Some(r) = cfg.systems_registry.as_mut() {
            resolve(r);
        }
        for link in &mut cfg.systems {
            let p = Path::new(&link.repo_url);
            if !link.repo_url.contains("://") && p.is_relative() && base.join(p).exists() {
                link.repo_url = base.join(p).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn registry_path(&self) -> PathBuf {
        self.systems_registry
            .clone()
            .unwrap_or_else(|| self.data_dir.join("systems.json"))
    }

    pub fn action_timeout(&self) -> Duration {
        self.action_timeout_s
            .map(|s| Duration::from_secs_f64(s.max(0.0)))
            .unwrap_or(DEFAULT_ACTION_TIMEOUT)
    }

    pub fn shutdown_grace(&self) -> Duration {
        Duration::from_secs_f64(self.shutdown_grace_s.unwrap_or(10.0).max(0.0))
    }

    pub fn effective_backends(&self) -> Vec<BackendConfig> {
        if self.backends.is_empty() {
            vec![BackendConfig {
                id: "local".into(),
                kind: BackendKind::Local,
                capacity: None,
                provisioning: None,
                cascade: None,
            }]
        } else {
            self.backends.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let backends = self.effective_backends();
        let mut seen = HashSet::new();
        for b in &backends {
            if !seen.insert(b.id.clone()) {
                return Err(ConfigError::Invalid(format!("duplicate backend id `{}`", b.id)));
            }
            if let Some(p) = &b.provisioning {
                p.validate()
                    .map_err(|e| ConfigError::Invalid(format!("backend {}: {e}", b.id)))?;
            }
        }
        if let Some(d) = &self.default_backend {
            if !seen.contains(d) {
                return Err(ConfigError::Invalid(format!("default_backend `{d}` is not configured")));
            }
        }
        if let Some(t) = self.action_timeout_s {
            if !(t > 0.0 && t.is_finite()) {
                return Err(ConfigError::Invalid("action_timeout_s must be positive".into()));
            }
        }
        if self.token.as_deref() == Some("") {
            return Err(ConfigError::Invalid("token must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg: ServiceConfig = serde_json::from_str(r#"{"data_dir": "/tmp/x"}"#).unwrap();
        assert_eq!(cfg.listen, default_listen());
        assert_eq!(cfg.registry_path(), PathBuf::from("/tmp/x/systems.json"));
        assert_eq!(cfg.runtime.kind, RuntimeKind::Host);
        assert_eq!(cfg.effective_backends().len(), 1);
        assert_eq!(cfg.action_timeout(), DEFAULT_ACTION_TIMEOUT);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_inconsistent_backends() {
        let mut cfg = ServiceConfig::new("/tmp/x");
        cfg.default_backend = Some("cloud".into());
        assert!(cfg.validate().is_err());
        cfg.default_backend = None;
        let local = cfg.effective_backends().remove(0);
        cfg.backends = vec![local.clone(), local];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ServiceConfig>(r#"{"data_dir": "x", "listn": "1"}"#).is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("svc.json");
        std::fs::write(&path, r#"{"data_dir": "data", "listen": "127.0.0.1:0"}"#).unwrap();
        let cfg = ServiceConfig::load(&path).unwrap();
        assert_eq!(cfg.data_dir, dir.path().join("data"));
    }
}
