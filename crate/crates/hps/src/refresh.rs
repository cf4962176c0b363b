//! Cache refresh: re-reads every resident key from the persistent tier and
//! overwrites the cached vector in place.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, warn};
use parking_lot::{Condvar, Mutex};

use crate::cache::SlabCache;
use crate::error::Result;
use crate::persistent::PersistentStore;

pub const DEFAULT_REFRESH_BATCH: usize = 65_536;
pub const DEFAULT_REFRESH_INTERVAL: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RefreshReport {
    /// Resident keys overwritten with the stored vector.
    pub refreshed: u64,
    /// Resident keys the persistent tier does not have.
    pub unresolved: u64,
}

impl std::ops::AddAssign for RefreshReport {
    fn add_assign(&mut self, rhs: Self) {
        self.refreshed += rhs.refreshed;
        self.unresolved += rhs.unresolved;
    }
}

/// Dumps the cache in batches, fetches each batch and writes it back with
/// `SlabCache::update`. Keys evicted meanwhile are skipped by `update`.
pub fn refresh_cache(cache: &SlabCache, pdb: &PersistentStore, table: &str, batch_size: usize) -> Result<RefreshReport> {
    let mut report = RefreshReport::default();
    for keys in cache.dump(batch_size) {
        let fetched = pdb.get(table, &keys)?;
        report.refreshed += cache.update(&fetched.keys, &fetched.values)? as u64;
        report.unresolved += fetched.missing.len() as u64;
    }
    debug!("refreshed `{table}`: {report:?}");
    Ok(report)
}

pub type RefreshJob = dyn Fn() -> Result<RefreshReport> + Send + Sync;

struct Shared {
    job: Box<RefreshJob>,
    running: AtomicBool,
    stop: AtomicBool,
    lock: Mutex<()>,
    wake: Condvar,
}

impl Shared {
    /// Runs the job unless a run is already in progress.
    fn run(&self) -> Option<Result<RefreshReport>> {
        if self.running.swap(true, Ordering::AcqRel) {
            return None;
        }
        let r = (self.job)();
        self.running.store(false, Ordering::Release);
        Some(r)
    }
}

/// Runs a refresh job every `interval` and on demand. Overlapping requests
/// are coalesced into the run already in progress.
pub struct Refresher {
    shared: Arc<Shared>,
    handle: Option<JoinHandle<()>>,
}

impl Refresher {
    pub fn spawn(interval: Duration, job: Box<RefreshJob>) -> Self {
        let shared = Arc::new(Shared {
            job,
            running: AtomicBool::new(false),
            stop: AtomicBool::new(false),
            lock: Mutex::new(()),
            wake: Condvar::new(),
        });
        let sh = Arc::clone(&shared);
        let handle = std::thread::Builder::new()
            .name("cache-refresh".into())
            .spawn(move || loop {
                {
                    let mut g = sh.lock.lock();
                    if sh.stop.load(Ordering::Acquire) {
                        break;
                    }
                    sh.wake.wait_for(&mut g, interval);
                    if sh.stop.load(Ordering::Acquire) {
                        break;
                    }
                }
                if let Some(Err(e)) = sh.run() {
                    warn!("periodic refresh failed: {e}");
                }
            })
            .expect("spawn refresh thread");
        Self { shared, handle: Some(handle) }
    }

    /// Runs the job now. Returns `None` if a run was already in progress.
    pub fn trigger(&self) -> Option<Result<RefreshReport>> {
        self.shared.run()
    }

    pub fn is_running(&self) -> bool {
        self.shared.running.load(Ordering::Acquire)
    }

    pub fn stop(&mut self) {
        {
            let _g = self.shared.lock.lock();
            self.shared.stop.store(true, Ordering::Release);
            self.shared.wake.notify_all();
        }
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Refresher {
    fn drop(&mut self) {
        self.stop();
    }
}
