//! System storage: a registry of repository links, each holding a
//! `sysdef.json` at its root, and per-experiment checkouts of them.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::format::{parse_sysdef, FormatError};
use crate::fsutil::{copy_tree, tree_digest, write_atomic};
use crate::model::{SysDef, SystemId};

pub const SYSDEF_FILE: &str = "sysdef.json";

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("invalid repository url `{0}`")]
    InvalidUrl(String),
    #[error("cannot fetch `{repo_url}`: {detail}")]
    Fetch { repo_url: String, detail: String },
    #[error("unknown system {0}")]
    UnknownSystem(SystemId),
    #[error("system {id} is already provided by `{existing}`")]
    Conflict { id: SystemId, existing: String },
    #[error("registry i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("registry file: {0}")]
    Registry(#[from] serde_json::Error),
}

/// Persisted part of a registry record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordLink {
    pub repo_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemRecord {
    pub repo_url: String,
    pub revision: Option<String>,
    /// Populated by the first successful fetch.
    pub cached: Option<SysDef>,
    pub error: Option<String>,
}

impl SystemRecord {
    fn link(&self) -> RecordLink {
        RecordLink {
            repo_url: self.repo_url.clone(),
            revision: self.revision.clone(),
        }
    }
}

/// One row of [`SystemStorage::list_systems`].
#[derive(Clone, Debug, PartialEq)]
pub struct SystemEntry {
    pub repo_url: String,
    pub revision: Option<String>,
    pub sysdef: Option<SysDef>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SystemWorkspaceSource {
    pub checkout_path: PathBuf,
    pub sysdef: SysDef,
    pub resolved_revision: String,
}

/// Retrieves a repository at a revision into an empty destination directory
/// and returns the resolved immutable revision.
pub trait RepoFetcher: Send + Sync + fmt::Debug {
    fn fetch(&self, repo_url: &str, revision: Option<&str>, dest: &Path) -> Result<String, String>;
}

/// Drives the `git` command line tool. The `.git` directory is dropped after
/// checkout so that workspaces hold plain source trees.
#[derive(Debug, Clone)]
pub struct GitFetcher {
    pub git: PathBuf,
}

impl Default for GitFetcher {
    fn default() -> Self {
        Self { git: "git".into() }
    }
}

impl GitFetcher {
    fn git(&self, args: &[&str], cwd: Option<&Path>) -> Result<String, String> {
        let mut cmd = Command::new(&self.git);
        cmd.args(args).env("GIT_TERMINAL_PROMPT", "0");
        if let Some(dir) = cwd {
            cmd.current_dir(dir);
        }
        let out = cmd
            .output()
            .map_err(|e| format!("cannot run {}: {e}", self.git.display()))?;
        if out.status.success() {
            Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
        } else {
            Err(String::from_utf8_lossy(&out.stderr).trim().to_string())
        }
    }
}

impl RepoFetcher for GitFetcher {
    fn fetch(&self, repo_url: &str, revision: Option<&str>, dest: &Path) -> Result<String, String> {
        // Plain paths go through file:// so that --depth is honoured.
        let url = match fs::canonicalize(repo_url) {
            Ok(p) if p.is_dir() => format!("file://{}", p.display()),
            _ => repo_url.to_string(),
        };
        let dest_str = dest.to_string_lossy();
        let shallow = match revision {
            None => self.git(&["clone", "--quiet", "--depth", "1", &url, &dest_str], None),
            Some(rev) => self.git(
                &["clone", "--quiet", "--depth", "1", "--branch", rev, &url, &dest_str],
                None,
            ),
        };
        if let Err(shallow_err) = shallow {
            // A commit id cannot be cloned shallowly by name.
            let Some(rev) = revision else {
                return Err(shallow_err);
            };
            let _ = fs::remove_dir_all(dest);
            self.git(&["clone", "--quiet", &url, &dest_str], None)?;
            self.git(&["checkout", "--quiet", rev], Some(dest))?;
        }
        let head = self.git(&["rev-parse", "HEAD"], Some(dest))?;
        fs::remove_dir_all(dest.join(".git")).map_err(|e| e.to_string())?;
        Ok(head)
    }
}

/// Treats a plain directory as a repository. The resolved revision is the
/// content digest of the tree.
#[derive(Debug, Clone, Default)]
pub struct LocalDirFetcher;

impl RepoFetcher for LocalDirFetcher {
    fn fetch(&self, repo_url: &str, revision: Option<&str>, dest: &Path) -> Result<String, String> {
        let src = Path::new(repo_url);
        if !src.is_dir() {
            return Err(format!("`{repo_url}` is not a directory"));
        }
        if let Some(rev) = revision {
            tracing::debug!(%repo_url, %rev, "revision selector ignored for directory repository");
        }
        copy_tree(src, dest).map_err(|e| e.to_string())?;
        tree_digest(dest)
            .map(|d| format!("tree:{d}"))
            .map_err(|e| e.to_string())
    }
}

fn validate_url(repo_url: &str) -> Result<(), StorageError> {
    let invalid = || StorageError::InvalidUrl(repo_url.to_string());
    if repo_url.trim().is_empty() || repo_url.chars().any(char::is_whitespace) {
        return Err(invalid());
    }
    if repo_url.contains("://") {
        url::Url::parse(repo_url).map_err(|_| invalid())?;
    }
    Ok(())
}

/// Registry of system repositories.
///
/// Mutations are serialized behind one lock; checkouts run outside of it.
#[derive(Debug)]
pub struct SystemStorage {
    registry_path: Option<PathBuf>,
    records: Mutex<Vec<SystemRecord>>,
    git: GitFetcher,
    local: LocalDirFetcher,
}

impl Default for SystemStorage {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl SystemStorage {
    pub fn in_memory() -> Self {
        Self {
            registry_path: None,
            records: Mutex::new(Vec::new()),
            git: GitFetcher::default(),
            local: LocalDirFetcher,
        }
    }

    /// Loads `systems.json` (missing file means empty registry) and fetches
    /// every record. Fetch failures are kept on the record, not returned.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let path = path.into();
        let links: Vec<RecordLink> = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let storage = Self {
            registry_path: Some(path),
            ..Self::in_memory()
        };
        {
            let mut records = storage.records.lock().unwrap();
            for link in links {
                let mut record = SystemRecord {
                    repo_url: link.repo_url,
                    revision: link.revision,
                    cached: None,
                    error: None,
                };
                storage.populate(&mut record, &records);
                records.push(record);
            }
        }
        Ok(storage)
    }

    fn fetcher_for(&self, repo_url: &str) -> &dyn RepoFetcher {
        let path = Path::new(repo_url);
        if !repo_url.contains("://") && path.is_dir() && !path.join(".git").exists() {
            &self.local
        } else {
            &self.git
        }
    }

    fn fetch_sysdef(&self, repo_url: &str, revision: Option<&str>) -> Result<SysDef, String> {
        let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
        let dest = scratch.path().join("repo");
        self.fetcher_for(repo_url).fetch(repo_url, revision, &dest)?;
        read_sysdef(&dest)
    }

    /// Fetches the record's SysDef; returns the fetch error if any.
    fn populate(&self, record: &mut SystemRecord, others: &[SystemRecord]) -> Option<StorageError> {
        match self.fetch_sysdef(&record.repo_url, record.revision.as_deref()) {
            Ok(def) => {
                if let Some(other) = others.iter().find(|o| {
                    o.repo_url != record.repo_url && o.cached.as_ref().map(|d| &d.id) == Some(&def.id)
                }) {
                    let err = StorageError::Conflict {
                        id: def.id,
                        existing: other.repo_url.clone(),
                    };
                    record.cached = None;
                    record.error = Some(err.to_string());
                    return Some(err);
                }
                record.cached = Some(def);
                record.error = None;
                None
            }
            Err(detail) => {
                record.cached = None;
                record.error = Some(detail.clone());
                Some(StorageError::Fetch {
                    repo_url: record.repo_url.clone(),
                    detail,
                })
            }
        }
    }

    fn persist(&self, records: &[SystemRecord]) -> Result<(), StorageError> {
        if let Some(path) = &self.registry_path {
            let links: Vec<RecordLink> = records.iter().map(SystemRecord::link).collect();
            let mut text = serde_json::to_vec_pretty(&links)?;
            text.push(b'\n');
            write_atomic(path, &text)?;
        }
        Ok(())
    }

    /// Registers a repository link. Re-registering a known URL updates its
    /// revision selector. A record whose first fetch fails stays in the
    /// registry (listed with its error) and the fetch error is returned.
    /// A second repository providing an already registered system identity
    /// is rejected and not recorded.
    pub fn register_system(
        &self,
        repo_url: &str,
        revision: Option<&str>,
    ) -> Result<SystemRecord, StorageError> {
        validate_url(repo_url)?;
        let mut records = self.records.lock().unwrap();
        let existing = records.iter().position(|r| r.repo_url == repo_url);
        let mut record = SystemRecord {
            repo_url: repo_url.to_string(),
            revision: revision.map(str::to_string),
            cached: None,
            error: None,
        };
        let others: Vec<SystemRecord> = records
            .iter()
            .filter(|r| r.repo_url != repo_url)
            .cloned()
            .collect();
        let failure = self.populate(&mut record, &others);
        if let Some(err @ StorageError::Conflict { .. }) = failure {
            return Err(err);
        }
        match existing {
            Some(i) => records[i] = record.clone(),
            None => records.push(record.clone()),
        }
        self.persist(&records)?;
        match failure {
            Some(err) => Err(err),
            None => Ok(record),
        }
    }

    /// Re-fetches every record, e.g. after repositories changed.
    pub fn refresh(&self) {
        let mut records = self.records.lock().unwrap();
        for i in 0..records.len() {
            let mut record = records[i].clone();
            let others: Vec<_> = records
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, r)| r.clone())
                .collect();
            self.populate(&mut record, &others);
            records[i] = record;
        }
    }

    pub fn list_systems(&self) -> Vec<SystemEntry> {
        self.records
            .lock()
            .unwrap()
            .iter()
            .map(|r| SystemEntry {
                repo_url: r.repo_url.clone(),
                revision: r.revision.clone(),
                sysdef: r.cached.clone(),
                error: r.error.clone(),
            })
            .collect()
    }

    pub fn sysdef(&self, id: &SystemId) -> Option<SysDef> {
        self.records
            .lock()
            .unwrap()
            .iter()
            .filter_map(|r| r.cached.as_ref())
            .find(|d| &d.id == id)
            .cloned()
    }

    /// Clones the system's repository into `destination`, which must not
    /// exist yet or be empty.
    pub fn checkout(
        &self,
        system: &SystemId,
        destination: &Path,
    ) -> Result<SystemWorkspaceSource, StorageError> {
        let (repo_url, revision) = {
            let records = self.records.lock().unwrap();
            let record = records
                .iter()
                .find(|r| r.cached.as_ref().map(|d| &d.id) == Some(system))
                .ok_or_else(|| StorageError::UnknownSystem(system.clone()))?;
            (record.repo_url.clone(), record.revision.clone())
        };
        let fetch_err = |detail: String| StorageError::Fetch {
            repo_url: repo_url.clone(),
            detail,
        };
        if destination.exists() && fs::read_dir(destination)?.next().is_some() {
            return Err(fetch_err(format!(
                "destination {} is not empty",
                destination.display()
            )));
        }
        if let Some(parent) = destination.parent() {
            fs::create_dir_all(parent)?;
        }
        let resolved_revision = self
            .fetcher_for(&repo_url)
            .fetch(&repo_url, revision.as_deref(), destination)
            .map_err(fetch_err)?;
        let sysdef = read_sysdef(destination).map_err(fetch_err)?;
        if &sysdef.id != system {
            return Err(fetch_err(format!(
                "repository now provides {} instead of {system}",
                sysdef.id
            )));
        }
        Ok(SystemWorkspaceSource {
            checkout_path: destination.to_path_buf(),
            sysdef,
            resolved_revision,
        })
    }
}

/// Reads and parses `sysdef.json` at a checkout root.
pub fn read_sysdef(root: &Path) -> Result<SysDef, String> {
    let path = root.join(SYSDEF_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(format!("missing {SYSDEF_FILE}"))
        }
        Err(e) => return Err(format!("cannot read {SYSDEF_FILE}: {e}")),
    };
    parse_sysdef(&text).map_err(|e: FormatError| format!("invalid {SYSDEF_FILE}: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sysdef_text(name: &str, version: &str) -> String {
        format!(
            r#"{{"name":"{name}","version":"{version}","docker_image":"img","build_command":"true","run_command":"true"}}"#
        )
    }

    fn repo(dir: &Path, name: &str, version: &str) -> PathBuf {
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join(SYSDEF_FILE), sysdef_text(name, version)).unwrap();
        fs::write(dir.join("model.c"), "int main(){return 0;}\n").unwrap();
        dir.to_path_buf()
    }

    #[test]
    fn url_validation() {
        assert!(validate_url("").is_err());
        assert!(validate_url("has space").is_err());
        assert!(validate_url("https://").is_err());
        assert!(validate_url("https://git.example.com/sys.git").is_ok());
        assert!(validate_url("/srv/repos/sys").is_ok());
    }

    #[test]
    fn register_is_idempotent_per_url() {
        let tmp = tempfile::tempdir().unwrap();
        let r = repo(&tmp.path().join("a"), "A", "1");
        let storage = SystemStorage::in_memory();
        let url = r.to_str().unwrap();
        storage.register_system(url, None).unwrap();
        storage.register_system(url, Some("main")).unwrap();
        let list = storage.list_systems();
        assert_eq!(list.len(), 1);
        assert_eq!(list[0].revision.as_deref(), Some("main"));
    }

    #[test]
    fn missing_sysdef_is_a_fetch_error_and_listed() {
        let tmp = tempfile::tempdir().unwrap();
        let empty = tmp.path().join("empty");
        fs::create_dir_all(&empty).unwrap();
        let storage = SystemStorage::in_memory();
        match storage.register_system(empty.to_str().unwrap(), None) {
            Err(StorageError::Fetch { detail, .. }) => assert_eq!(detail, "missing sysdef.json"),
            other => panic!("{other:?}"),
        }
        let list = storage.list_systems();
        assert_eq!(list.len(), 1);
        assert!(list[0].sysdef.is_none());
        assert_eq!(list[0].error.as_deref(), Some("missing sysdef.json"));
    }

    #[test]
    fn identity_conflicts_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let a = repo(&tmp.path().join("a"), "Same", "1");
        let b = repo(&tmp.path().join("b"), "Same", "1");
        let storage = SystemStorage::in_memory();
        storage.register_system(a.to_str().unwrap(), None).unwrap();
        assert!(matches!(
            storage.register_system(b.to_str().unwrap(), None),
            Err(StorageError::Conflict { .. })
        ));
        assert_eq!(storage.list_systems().len(), 1);
    }

    #[test]
    fn registry_file_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let a = repo(&tmp.path().join("a"), "A", "1");
        let path = tmp.path().join("systems.json");
        {
            let storage = SystemStorage::open(&path).unwrap();
            storage.register_system(a.to_str().unwrap(), None).unwrap();
        }
        let reopened = SystemStorage::open(&path).unwrap();
        let list = reopened.list_systems();
        assert_eq!(list.len(), 1);
        assert_eq!(list[0].sysdef.as_ref().unwrap().id, SystemId::new("A", "1"));
    }

    #[test]
    fn checkout_unknown_system() {
        let storage = SystemStorage::in_memory();
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            storage.checkout(&SystemId::new("nope", "0"), &tmp.path().join("x")),
            Err(StorageError::UnknownSystem(_))
        ));
    }
}
