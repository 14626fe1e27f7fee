//! Experiment records, one JSON file per experiment under
//! `<data_dir>/experiments/<id>/record.json`. A record is written before the
//! change becomes visible to readers.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use simhub_core::backends::SessionHandle;
use simhub_core::fsutil::write_atomic;
use simhub_core::{Experiment, ExperimentId, ExperimentState, LifecycleEvent};
use tokio::sync::{watch, Mutex};

pub const RECORD_FILE: &str = "record.json";
pub const INTERRUPTED: &str = "interrupted";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Record {
    pub experiment: Experiment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<SessionHandle>,
}

#[derive(Debug)]
pub struct Entry {
    pub id: ExperimentId,
    pub dir: PathBuf,
    record: Mutex<Record>,
    snapshot: watch::Sender<Arc<Experiment>>,
}

impl Entry {
    fn new(dir: PathBuf, record: Record) -> Self {
        let (snapshot, _) = watch::channel(Arc::new(record.experiment.clone()));
        Self {
            id: record.experiment.id.clone(),
            dir,
            record: Mutex::new(record),
            snapshot,
        }
    }

    /// Latest persisted state of the experiment.
    pub fn snapshot(&self) -> Arc<Experiment> {
        self.snapshot.borrow().clone()
    }

    pub fn subscribe(&self) -> watch::Receiver<Arc<Experiment>> {
        self.snapshot.subscribe()
    }

    pub async fn record(&self) -> Record {
        self.record.lock().await.clone()
    }

    /// Applies `f` to a copy of the record, persists the copy and only then
    /// publishes it. Nothing changes if `f` or the write fails.
    pub async fn update<T, E>(&self, f: impl FnOnce(&mut Record) -> Result<T, E>) -> Result<T, E>
    where
        E: From<io::Error>,
    {
        let mut guard = self.record.lock().await;
        let mut next = guard.clone();
        let out = f(&mut next)?;
        persist(&self.dir, &next)?;
        *guard = next;
        let exp = Arc::new(guard.experiment.clone());
        self.snapshot.send_replace(exp);
        Ok(out)
    }
}

fn persist(dir: &Path, record: &Record) -> io::Result<()> {
    let bytes = serde_json::to_vec_pretty(record).map_err(io::Error::other)?;
    write_atomic(&dir.join(RECORD_FILE), &bytes)
}

#[derive(Debug)]
pub struct ExperimentStore {
    root: PathBuf,
    entries: RwLock<BTreeMap<ExperimentId, Arc<Entry>>>,
    next: AtomicU64,
}

impl ExperimentStore {
    /// Loads every record under `root`. Experiments caught mid-action are
    /// moved to their failed state with detail "interrupted"; their ids are
    /// returned.
    pub fn open(root: impl Into<PathBuf>) -> io::Result<(Self, Vec<ExperimentId>)> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut entries = BTreeMap::new();
        let mut demoted = Vec::new();
        let mut max_seq = 0;
        for dirent in fs::read_dir(&root)? {
            let dir = dirent?.path();
            let file = dir.join(RECORD_FILE);
            let Ok(bytes) = fs::read(&file) else { continue };
            let mut record: Record = match serde_json::from_slice(&bytes) {
                Ok(r) => r,
                Err(e) => {
                    tracing::warn!(path = %file.display(), "skipping unreadable record: {e}");
                    continue;
                }
            };
            let exp = &mut record.experiment;
            let event = match exp.state {
                ExperimentState::Building => Some(LifecycleEvent::BuildErr),
                ExperimentState::Running => Some(LifecycleEvent::RunErr),
                _ => None,
            };
            if let Some(event) = event {
                exp.apply(event, Utc::now()).expect("failure edge exists for active states");
                exp.detail = Some(INTERRUPTED.into());
                persist(&dir, &record)?;
                demoted.push(record.experiment.id.clone());
            }
            max_seq = max_seq.max(record.experiment.id.sequence().unwrap_or(0));
            entries.insert(record.experiment.id.clone(), Arc::new(Entry::new(dir, record)));
        }
        demoted.sort();
        Ok((
            Self {
                root,
                entries: RwLock::new(entries),
                next: AtomicU64::new(max_seq + 1),
            },
            demoted,
        ))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Allocates an id, persists the experiment built by `make` and
    /// registers it.
    pub fn create(&self, make: impl FnOnce(ExperimentId) -> Experiment) -> io::Result<Arc<Entry>> {
        let id = ExperimentId::from_sequence(self.next.fetch_add(1, Ordering::SeqCst));
        let dir = self.root.join(id.as_str());
        fs::create_dir_all(&dir)?;
        let record = Record {
            experiment: make(id.clone()),
            session: None,
        };
        persist(&dir, &record)?;
        let entry = Arc::new(Entry::new(dir, record));
        self.entries.write().unwrap().insert(id, entry.clone());
        Ok(entry)
    }

    pub fn get(&self, id: &ExperimentId) -> Option<Arc<Entry>> {
        self.entries.read().unwrap().get(id).cloned()
    }

    /// All entries in creation order.
    pub fn all(&self) -> Vec<Arc<Entry>> {
        self.entries.read().unwrap().values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
