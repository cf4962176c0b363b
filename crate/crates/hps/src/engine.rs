//! The lookup path: dedup, cache query, then either a blocking fetch from
//! the lower tiers or default vectors plus a background insert, depending
//! on how the batch's hit rate compares with the configured threshold.
//!
//! The hit rate of a batch is `hits / unique_keys` (1.0 for an empty batch).
//! Below the threshold misses are fetched through the [`TierChain`],
//! inserted with `SlabCache::replace` and returned. At or above it they are
//! answered with the table's default vector, flagged in `miss_flags`, and a
//! task owning the batch workspace fetches and inserts them later.
//!
//! Workspaces come from a fixed pool; when it is empty `lookup` blocks,
//! which throttles callers while background inserts are backed up.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;

use hps_core::{dedup, EmbeddingKey, LookupQuery, LookupResult, TableId};
use log::warn;
use parking_lot::{Condvar, Mutex, RwLock};

use crate::cache::{CacheConfig, SlabCache};
use crate::error::{Error, Result};
use crate::tier::{Fetched, TierChain};

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub hit_rate_threshold: f64,
    pub workspace_pool_size: usize,
    pub async_worker_count: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { hit_rate_threshold: 0.8, workspace_pool_size: 16, async_worker_count: 2 }
    }
}

/// Scratch buffers for one in-flight lookup or queued background insert.
#[derive(Debug)]
pub struct Workspace {
    id: usize,
    pub missing_keys: Vec<EmbeddingKey>,
    pub missing_positions: Vec<usize>,
    pub vectors: Vec<f32>,
    pub hit_rate: f64,
}

impl Workspace {
    pub fn id(&self) -> usize {
        self.id
    }

    fn reset(&mut self) {
        self.missing_keys.clear();
        self.missing_positions.clear();
        self.vectors.clear();
        self.hit_rate = 0.0;
    }
}

/// Fixed-size workspace pool. `request` blocks until a block is free.
pub struct WorkspacePool {
    free: Mutex<Vec<Workspace>>,
    available: Condvar,
    size: usize,
    outstanding: AtomicUsize,
    peak: AtomicUsize,
}

impl WorkspacePool {
    pub fn new(size: usize) -> Self {
        assert!(size >= 1, "workspace pool must not be empty");
        let free = (0..size)
            .rev()
            .map(|id| Workspace { id, missing_keys: Vec::new(), missing_positions: Vec::new(), vectors: Vec::new(), hit_rate: 0.0 })
            .collect();
        Self { free: Mutex::new(free), available: Condvar::new(), size, outstanding: AtomicUsize::new(0), peak: AtomicUsize::new(0) }
    }

    pub fn request(&self) -> Workspace {
        let mut free = self.free.lock();
        loop {
            if let Some(mut ws) = free.pop() {
                let now = self.outstanding.fetch_add(1, Ordering::AcqRel) + 1;
                self.peak.fetch_max(now, Ordering::AcqRel);
                ws.reset();
                return ws;
            }
            self.available.wait(&mut free);
        }
    }

    pub fn release(&self, ws: Workspace) {
        let mut free = self.free.lock();
        free.push(ws);
        self.outstanding.fetch_sub(1, Ordering::AcqRel);
        self.available.notify_one();
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding.load(Ordering::Acquire)
    }

    /// Highest number of workspaces ever checked out at once.
    pub fn peak_outstanding(&self) -> usize {
        self.peak.load(Ordering::Acquire)
    }
}

/// Which insertion branch a lookup took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertPath {
    Sync,
    Async,
}

#[derive(Debug, Clone)]
pub struct LookupReport {
    pub result: LookupResult,
    pub hit_rate: f64,
    pub path: InsertPath,
    pub unique_keys: usize,
}

/// Per-table lookup counters. Hits and misses count unique keys.
#[derive(Debug, Default)]
pub struct EngineStats {
    pub lookups: AtomicU64,
    pub cache_hits: AtomicU64,
    pub cache_misses: AtomicU64,
    pub defaults_returned: AtomicU64,
    pub sync_batches: AtomicU64,
    pub async_batches: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StatsSnapshot {
    pub occupied_slots: u64,
    pub lookups: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub defaults_returned: u64,
    pub sync_batches: u64,
    pub async_batches: u64,
}

impl StatsSnapshot {
    /// Cumulative unique-key hit rate, 1.0 before any lookup.
    pub fn hit_rate(&self) -> f64 {
        let total = self.cache_hits + self.cache_misses;
        if total == 0 {
            1.0
        } else {
            self.cache_hits as f64 / total as f64
        }
    }
}

struct TableRuntime {
    table: TableId,
    cache: Arc<SlabCache>,
    default_vector: Vec<f32>,
    stats: EngineStats,
}

struct AsyncInsert {
    rt: Arc<TableRuntime>,
    ws: Workspace,
}

#[derive(Default)]
struct InFlight {
    count: Mutex<usize>,
    idle: Condvar,
}

struct Shared {
    tiers: TierChain,
    pool: WorkspacePool,
    inflight: InFlight,
}

impl Shared {
    fn finish(&self) {
        let mut n = self.inflight.count.lock();
        *n -= 1;
        if *n == 0 {
            self.inflight.idle.notify_all();
        }
    }

    fn run_async_insert(&self, task: AsyncInsert) {
        let AsyncInsert { rt, mut ws } = task;
        match self.tiers.fetch(rt.table.name(), &ws.missing_keys) {
            Ok(found) => {
                ws.vectors.clear();
                ws.vectors.extend_from_slice(&found.values);
                if let Err(e) = rt.cache.replace(&found.keys, &ws.vectors) {
                    warn!("background insert into `{}` failed: {e}", rt.table.name());
                }
            }
            Err(e) => warn!("background fetch for `{}` failed: {e}", rt.table.name()),
        }
        self.pool.release(ws);
        self.finish();
    }
}

pub struct LookupEngine {
    config: EngineConfig,
    tables: RwLock<HashMap<String, Arc<TableRuntime>>>,
    shared: Arc<Shared>,
    senders: Vec<mpsc::Sender<AsyncInsert>>,
    workers: Vec<JoinHandle<()>>,
}

impl LookupEngine {
    pub fn new(config: EngineConfig, tiers: TierChain) -> Self {
        assert!((0.0..=1.0).contains(&config.hit_rate_threshold), "threshold must be in [0, 1]");
        assert!(config.async_worker_count >= 1);
        let shared = Arc::new(Shared { tiers, pool: WorkspacePool::new(config.workspace_pool_size), inflight: InFlight::default() });
        let mut senders = Vec::new();
        let mut workers = Vec::new();
        for i in 0..config.async_worker_count {
            let (tx, rx) = mpsc::channel::<AsyncInsert>();
            let sh = Arc::clone(&shared);
            let handle = std::thread::Builder::new()
                .name(format!("async-insert-{i}"))
                .spawn(move || {
                    for task in rx {
                        sh.run_async_insert(task);
                    }
                })
                .expect("spawn async insert worker");
            senders.push(tx);
            workers.push(handle);
        }
        Self { config, tables: RwLock::default(), shared, senders, workers }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn tiers(&self) -> &TierChain {
        &self.shared.tiers
    }

    pub fn pool(&self) -> &WorkspacePool {
        &self.shared.pool
    }

    pub fn stats(&self, name: &str) -> Result<StatsSnapshot> {
        let rt = self.runtime(name)?;
        let l = |a: &AtomicU64| a.load(Ordering::Relaxed);
        let s = &rt.stats;
        Ok(StatsSnapshot {
            occupied_slots: rt.cache.occupied() as u64,
            lookups: l(&s.lookups),
            cache_hits: l(&s.cache_hits),
            cache_misses: l(&s.cache_misses),
            defaults_returned: l(&s.defaults_returned),
            sync_batches: l(&s.sync_batches),
            async_batches: l(&s.async_batches),
        })
    }

    pub fn tables(&self) -> Vec<TableId> {
        let mut v: Vec<_> = self.tables.read().values().map(|r| r.table.clone()).collect();
        v.sort_by(|a, b| a.name().cmp(b.name()));
        v
    }

    /// Attaches a cache to `table`. `default_vector` defaults to zeros.
    pub fn register_table(&self, table: &TableId, cache: CacheConfig, default_vector: Option<Vec<f32>>) -> Result<Arc<SlabCache>> {
        table.check_dim(cache.dim)?;
        let default_vector = default_vector.unwrap_or_else(|| vec![0.0; table.dim()]);
        table.check_dim(default_vector.len())?;
        hps_core::types::check_finite(&default_vector)?;
        let mut tables = self.tables.write();
        if tables.contains_key(table.name()) {
            return Err(Error::TableExists(table.name().to_string()));
        }
        let cache = Arc::new(SlabCache::new(cache));
        tables.insert(
            table.name().to_string(),
            Arc::new(TableRuntime { table: table.clone(), cache: Arc::clone(&cache), default_vector, stats: EngineStats::default() }),
        );
        Ok(cache)
    }

    pub fn table(&self, name: &str) -> Result<TableId> {
        Ok(self.runtime(name)?.table.clone())
    }

    pub fn cache(&self, name: &str) -> Result<Arc<SlabCache>> {
        Ok(Arc::clone(&self.runtime(name)?.cache))
    }

    fn runtime(&self, name: &str) -> Result<Arc<TableRuntime>> {
        self.tables.read().get(name).cloned().ok_or_else(|| Error::UnknownTable(name.to_string()))
    }

    pub fn lookup(&self, query: &LookupQuery) -> Result<LookupResult> {
        self.lookup_detailed(query).map(|r| r.result)
    }

    pub fn lookup_detailed(&self, query: &LookupQuery) -> Result<LookupReport> {
        let rt = self.runtime(query.table.name())?;
        rt.table.check_dim(query.table.dim())?;
        let dim = rt.table.dim();

        let mut ws = self.shared.pool.request();
        let d = dedup(&query.keys);
        let mut q = rt.cache.query(&d.unique);
        let hits = q.hits();
        let unique = d.unique.len();
        ws.hit_rate = if unique == 0 { 1.0 } else { hits as f64 / unique as f64 };
        for (pos, key) in q.misses.drain(..) {
            ws.missing_positions.push(pos);
            ws.missing_keys.push(key);
        }
        let mut flags = vec![false; unique];

        rt.stats.lookups.fetch_add(1, Ordering::Relaxed);
        rt.stats.cache_hits.fetch_add(hits as u64, Ordering::Relaxed);
        rt.stats.cache_misses.fetch_add(ws.missing_keys.len() as u64, Ordering::Relaxed);

        let hit_rate = ws.hit_rate;
        let path = if hit_rate < self.config.hit_rate_threshold {
            let fetched = match self.shared.tiers.fetch(rt.table.name(), &ws.missing_keys) {
                Ok(f) => f,
                Err(e) => {
                    self.shared.pool.release(ws);
                    return Err(e);
                }
            };
            let by_key = index_of(&fetched);
            for (&pos, key) in ws.missing_positions.iter().zip(&ws.missing_keys) {
                let row = &mut q.values[pos * dim..(pos + 1) * dim];
                match by_key.get(key) {
                    Some(&i) => row.copy_from_slice(fetched.vector(i)),
                    None => {
                        row.copy_from_slice(&rt.default_vector);
                        flags[pos] = true;
                    }
                }
            }
            ws.vectors.extend_from_slice(&fetched.values);
            let inserted = rt.cache.replace(&fetched.keys, &ws.vectors);
            self.shared.pool.release(ws);
            inserted?;
            rt.stats.sync_batches.fetch_add(1, Ordering::Relaxed);
            InsertPath::Sync
        } else {
            for &pos in &ws.missing_positions {
                q.values[pos * dim..(pos + 1) * dim].copy_from_slice(&rt.default_vector);
                flags[pos] = true;
            }
            rt.stats.async_batches.fetch_add(1, Ordering::Relaxed);
            if ws.missing_keys.is_empty() {
                self.shared.pool.release(ws);
            } else {
                self.queue_insert(AsyncInsert { rt: Arc::clone(&rt), ws });
            }
            InsertPath::Async
        };

        let mut values = Vec::with_capacity(d.inverse.len() * dim);
        let mut miss_flags = Vec::with_capacity(d.inverse.len());
        for &u in &d.inverse {
            values.extend_from_slice(&q.values[u * dim..(u + 1) * dim]);
            miss_flags.push(flags[u]);
        }
        let result = LookupResult::new(dim, values, miss_flags);
        rt.stats.defaults_returned.fetch_add(result.defaults_returned() as u64, Ordering::Relaxed);
        Ok(LookupReport { result, hit_rate, path, unique_keys: unique })
    }

    fn queue_insert(&self, task: AsyncInsert) {
        *self.shared.inflight.count.lock() += 1;
        // one FIFO worker per table keeps a table's inserts in order
        let mut h = DefaultHasher::new();
        task.rt.table.name().hash(&mut h);
        let lane = (h.finish() % self.senders.len() as u64) as usize;
        if let Err(mpsc::SendError(task)) = self.senders[lane].send(task) {
            self.shared.pool.release(task.ws);
            self.shared.finish();
        }
    }

    /// Waits until every queued background insert has finished, then until
    /// the volatile tier's own background work is done.
    pub fn drain(&self) {
        {
            let mut n = self.shared.inflight.count.lock();
            while *n > 0 {
                self.shared.inflight.idle.wait(&mut n);
            }
        }
        if let Some(vdb) = self.shared.tiers.volatile() {
            vdb.drain();
        }
    }
}

impl Drop for LookupEngine {
    fn drop(&mut self) {
        self.senders.clear();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn index_of(f: &Fetched) -> HashMap<EmbeddingKey, usize> {
    f.keys.iter().enumerate().map(|(i, k)| (*k, i)).collect()
}
