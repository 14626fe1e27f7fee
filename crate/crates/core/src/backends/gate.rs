use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use tokio::sync::{OwnedSemaphorePermit, Semaphore};

use crate::model::Capacity;

/// Bounds concurrent actions on a backend and records how many were ever
/// in flight at once.
#[derive(Debug)]
pub struct CapacityGate {
    capacity: Capacity,
    sem: Option<Arc<Semaphore>>,
    active: Arc<AtomicUsize>,
    high_water: Arc<AtomicUsize>,
}

#[derive(Debug)]
pub struct GatePermit {
    active: Arc<AtomicUsize>,
    _permit: Option<OwnedSemaphorePermit>,
}

impl Drop for GatePermit {
    fn drop(&mut self) {
        self.active.fetch_sub(1, Ordering::SeqCst);
    }
}

impl CapacityGate {
    pub fn new(capacity: Capacity) -> Self {
        Self {
            capacity,
            sem: capacity.limit().map(|n| Arc::new(Semaphore::new(n))),
            active: Arc::new(AtomicUsize::new(0)),
            high_water: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn capacity(&self) -> Capacity {
        self.capacity
    }

    pub async fn acquire(&self) -> GatePermit {
        let permit = match &self.sem {
            Some(sem) => Some(sem.clone().acquire_owned().await.expect("gate never closes")),
            None => None,
        };
        let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
        self.high_water.fetch_max(now, Ordering::SeqCst);
        GatePermit {
            active: self.active.clone(),
            _permit: permit,
        }
    }

    pub fn active(&self) -> usize {
        self.active.load(Ordering::SeqCst)
    }

    pub fn high_water(&self) -> usize {
        self.high_water.load(Ordering::SeqCst)
    }
}
