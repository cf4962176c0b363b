//! Volatile tier: per-table sets of bounded, hash-partitioned maps.
//!
//! Each key lives in partition `partition_of(key, partition_count)`. Every
//! entry carries a logical last-access timestamp taken from a per-table
//! counter that advances once per lookup or insert call. Timestamp refresh
//! after a lookup and fill-insertions after a persistent-tier read happen on
//! a background worker; [`VolatileStore::drain`] waits for it to go idle.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;

use hps_core::hashing::partition_of;
use hps_core::partition::{EvictionPolicy, Partition};
use hps_core::{EmbeddingKey, TableId};
use log::warn;
use parking_lot::{Condvar, Mutex, RwLock};

use crate::error::{Error, Result};
use crate::persistent::PersistentStore;
use crate::tier::Fetched;

#[derive(Debug, Clone)]
pub struct VolatileTableConfig {
    pub partition_count: usize,
    /// Maximum entries per partition.
    pub overflow_margin: usize,
    pub eviction_policy: EvictionPolicy,
    /// Share of the persistent table loaded at registration.
    pub initial_cache_rate: f64,
}

impl Default for VolatileTableConfig {
    fn default() -> Self {
        Self {
            partition_count: 16,
            overflow_margin: 1 << 20,
            eviction_policy: EvictionPolicy::EvictOldest,
            initial_cache_rate: 0.0,
        }
    }
}

struct VolatileTable {
    table: TableId,
    partitions: Vec<Mutex<Partition>>,
    clock: AtomicU64,
}

impl VolatileTable {
    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::AcqRel) + 1
    }

    fn partition(&self, key: EmbeddingKey) -> &Mutex<Partition> {
        &self.partitions[partition_of(key, self.partitions.len())]
    }

    fn insert(&self, keys: &[EmbeddingKey], values: &[f32], only_absent: bool) -> Vec<EmbeddingKey> {
        let at = self.tick();
        let dim = self.table.dim();
        let mut touched = vec![false; self.partitions.len()];
        for (k, v) in keys.iter().zip(values.chunks_exact(dim)) {
            let p = partition_of(*k, self.partitions.len());
            let mut part = self.partitions[p].lock();
            if only_absent {
                part.insert_if_absent(*k, v, at);
            } else {
                part.insert(*k, v, at);
            }
            touched[p] = true;
        }
        let mut evicted = Vec::new();
        for (p, t) in touched.into_iter().enumerate() {
            if t {
                evicted.extend(self.partitions[p].lock().evict());
            }
        }
        evicted
    }
}

enum Task {
    Touch { table: Arc<VolatileTable>, keys: Vec<EmbeddingKey>, at: u64 },
    Fill { table: Arc<VolatileTable>, keys: Vec<EmbeddingKey>, values: Vec<f32> },
}

#[derive(Default)]
struct Pending {
    count: Mutex<usize>,
    idle: Condvar,
}

pub struct VolatileStore {
    tables: RwLock<HashMap<String, Arc<VolatileTable>>>,
    tx: Option<mpsc::Sender<Task>>,
    pending: Arc<Pending>,
    worker: Option<JoinHandle<()>>,
}

impl Default for VolatileStore {
    fn default() -> Self {
        Self::new()
    }
}

impl VolatileStore {
    pub fn new() -> Self {
        let (tx, rx) = mpsc::channel::<Task>();
        let pending = Arc::new(Pending::default());
        let p = Arc::clone(&pending);
        let worker = std::thread::Builder::new()
            .name("vdb-background".into())
            .spawn(move || {
                for task in rx {
                    match task {
                        Task::Touch { table, keys, at } => {
                            for k in keys {
                                table.partition(k).lock().touch(k, at);
                            }
                        }
                        Task::Fill { table, keys, values } => {
                            table.insert(&keys, &values, true);
                        }
                    }
                    let mut n = p.count.lock();
                    *n -= 1;
                    if *n == 0 {
                        p.idle.notify_all();
                    }
                }
            })
            .expect("spawn volatile-tier worker");
        Self { tables: RwLock::default(), tx: Some(tx), pending, worker: Some(worker) }
    }

    pub fn register(&self, table: &TableId, config: VolatileTableConfig) -> Result<()> {
        assert!(config.partition_count >= 1, "partition_count must be positive");
        let mut tables = self.tables.write();
        if tables.contains_key(table.name()) {
            return Err(Error::TableExists(table.name().to_string()));
        }
        let partitions = (0..config.partition_count)
            .map(|_| Mutex::new(Partition::new(config.overflow_margin, config.eviction_policy)))
            .collect();
        tables.insert(
            table.name().to_string(),
            Arc::new(VolatileTable { table: table.clone(), partitions, clock: AtomicU64::new(0) }),
        );
        Ok(())
    }

    /// Loads the first `rate` share of the persistent table (by key order).
    pub fn preload(&self, name: &str, pdb: &PersistentStore, rate: f64) -> Result<usize> {
        let keys = pdb.keys(name)?;
        let n = ((keys.len() as f64) * rate.clamp(0.0, 1.0)).ceil() as usize;
        for chunk in keys[..n].chunks(4096) {
            let f = pdb.get(name, chunk)?;
            self.insert(name, &f.keys, &f.values)?;
        }
        Ok(n)
    }

    fn handle(&self, name: &str) -> Result<Arc<VolatileTable>> {
        self.tables.read().get(name).cloned().ok_or_else(|| Error::UnknownTable(name.to_string()))
    }

    pub fn partition_count(&self, name: &str) -> Result<usize> {
        Ok(self.handle(name)?.partitions.len())
    }

    /// Returns resident vectors; their timestamps are refreshed afterwards
    /// on the background worker.
    pub fn lookup(&self, name: &str, keys: &[EmbeddingKey]) -> Result<Fetched> {
        let t = self.handle(name)?;
        let at = t.tick();
        let mut out = Fetched::new(t.table.dim());
        for &k in keys {
            match t.partition(k).lock().get(k) {
                Some(v) => out.push(k, v),
                None => out.missing.push(k),
            }
        }
        if !out.keys.is_empty() {
            self.submit(Task::Touch { table: t, keys: out.keys.clone(), at });
        }
        Ok(out)
    }

    /// Last-writer-wins insert; partitions over their margin are pruned
    /// before returning. Returns the evicted keys.
    pub fn insert(&self, name: &str, keys: &[EmbeddingKey], values: &[f32]) -> Result<Vec<EmbeddingKey>> {
        let t = self.handle(name)?;
        check_len(&t.table, keys, values)?;
        hps_core::types::check_finite(values)?;
        Ok(t.insert(keys, values, false))
    }

    /// Queues an insert of vectors fetched from a lower tier. Keys that are
    /// resident by the time it runs keep their current value.
    pub fn fill_async(&self, name: &str, keys: Vec<EmbeddingKey>, values: Vec<f32>) -> Result<()> {
        let t = self.handle(name)?;
        check_len(&t.table, &keys, &values)?;
        self.submit(Task::Fill { table: t, keys, values });
        Ok(())
    }

    /// Blocks until every queued background task has run.
    pub fn drain(&self) {
        let mut n = self.pending.count.lock();
        while *n > 0 {
            self.pending.idle.wait(&mut n);
        }
    }

    pub fn last_access(&self, name: &str, key: EmbeddingKey) -> Result<Option<u64>> {
        Ok(self.handle(name)?.partition(key).lock().last_access(key))
    }

    pub fn len(&self, name: &str) -> Result<usize> {
        Ok(self.handle(name)?.partitions.iter().map(|p| p.lock().len()).sum())
    }

    /// Entry count per partition.
    pub fn partition_sizes(&self, name: &str) -> Result<Vec<usize>> {
        Ok(self.handle(name)?.partitions.iter().map(|p| p.lock().len()).collect())
    }

    /// Every `(partition, key, last_access)`.
    pub fn scan(&self, name: &str) -> Result<Vec<(usize, EmbeddingKey, u64)>> {
        let t = self.handle(name)?;
        let mut out = Vec::new();
        for (i, p) in t.partitions.iter().enumerate() {
            out.extend(p.lock().iter().map(|(k, _, ts)| (i, k, ts)));
        }
        Ok(out)
    }

    fn submit(&self, task: Task) {
        *self.pending.count.lock() += 1;
        if let Some(tx) = &self.tx {
            if tx.send(task).is_ok() {
                return;
            }
        }
        warn!("volatile-tier worker is gone; dropping task");
        *self.pending.count.lock() -= 1;
    }
}

impl Drop for VolatileStore {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn check_len(table: &TableId, keys: &[EmbeddingKey], values: &[f32]) -> Result<()> {
    let dim = table.dim();
    if values.len() != keys.len() * dim {
        if !keys.is_empty() && values.len().is_multiple_of(keys.len()) {
            table.check_dim(values.len() / keys.len())?;
        }
        return Err(hps_core::CoreError::LengthMismatch { keys: keys.len(), vectors: values.len() / dim }.into());
    }
    Ok(())
}
