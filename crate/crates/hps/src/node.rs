//! A complete server-side stack: persistent store, optional volatile tier,
//! update stream with its ingestor, lookup engine and periodic refresh.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use hps_core::wire::{Request, Response, StatsBody};
use hps_core::{EmbeddingKey, LookupQuery, LookupResult};
use log::info;

use crate::cache::CacheConfig;
use crate::engine::{EngineConfig, LookupEngine};
use crate::error::{Error, Result};
use crate::persistent::PersistentStore;
use crate::refresh::{refresh_cache, RefreshReport, Refresher, DEFAULT_REFRESH_BATCH, DEFAULT_REFRESH_INTERVAL};
use crate::stream::{Ingestor, UpdateBroker, DEFAULT_INGEST_INTERVAL, DEFAULT_RATE_LIMIT};
use crate::tier::TierChain;
use crate::volatile::{VolatileStore, VolatileTableConfig};

/// Directory under the store root holding topic logs. Table names cannot
/// start with '.', so it never collides with a table.
pub const TOPIC_DIR: &str = ".topics";

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub engine: EngineConfig,
    /// Slots per table cache; rounded up to whole slabsets.
    pub cache_capacity: usize,
    pub cache_workers: usize,
    /// `None` disables the volatile tier.
    pub volatile: Option<VolatileTableConfig>,
    pub ingest_interval: Duration,
    pub ingest_rate_limit: usize,
    pub refresh_interval: Duration,
    pub refresh_batch: usize,
    /// Overrides the topic log directory; `None` uses `<root>/.topics`.
    pub topic_dir: Option<PathBuf>,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            cache_capacity: 1 << 16,
            cache_workers: 1,
            volatile: Some(VolatileTableConfig::default()),
            ingest_interval: DEFAULT_INGEST_INTERVAL,
            ingest_rate_limit: DEFAULT_RATE_LIMIT,
            refresh_interval: DEFAULT_REFRESH_INTERVAL,
            refresh_batch: DEFAULT_REFRESH_BATCH,
            topic_dir: None,
        }
    }
}

pub struct Node {
    pdb: Arc<PersistentStore>,
    vdb: Option<Arc<VolatileStore>>,
    broker: Arc<UpdateBroker>,
    engine: Arc<LookupEngine>,
    ingestor: Ingestor,
    refresher: Refresher,
    refresh_batch: usize,
}

impl Node {
    /// Serves every table already present in `pdb`.
    pub fn start(pdb: Arc<PersistentStore>, config: NodeConfig) -> Result<Self> {
        let vdb = config.volatile.as_ref().map(|_| Arc::new(VolatileStore::new()));
        let topic_dir = config.topic_dir.clone().unwrap_or_else(|| pdb.root().join(TOPIC_DIR));
        let broker = Arc::new(UpdateBroker::persisted(topic_dir)?);
        let engine = Arc::new(LookupEngine::new(config.engine.clone(), TierChain::new(vdb.clone(), Arc::clone(&pdb))));
        let mut subs = Vec::new();
        for table in pdb.tables() {
            if let (Some(v), Some(vc)) = (&vdb, &config.volatile) {
                v.register(&table, vc.clone())?;
                if vc.initial_cache_rate > 0.0 {
                    let n = v.preload(table.name(), &pdb, vc.initial_cache_rate)?;
                    info!("preloaded {n} rows of `{}` into the volatile tier", table.name());
                }
            }
            let mut cc = CacheConfig::for_capacity(config.cache_capacity, table.dim());
            cc.worker_pool_size = config.cache_workers;
            engine.register_table(&table, cc, None)?;
            broker.create_topic(&table)?;
            subs.push(broker.subscribe(table.name(), 1, None)?.with_rate_limit(config.ingest_rate_limit));
        }
        let ingestor = Ingestor::spawn(subs, vdb.clone(), Arc::clone(&pdb), config.ingest_interval);
        let (e, p, batch) = (Arc::clone(&engine), Arc::clone(&pdb), config.refresh_batch);
        let refresher = Refresher::spawn(
            config.refresh_interval,
            Box::new(move || {
                let mut total = RefreshReport::default();
                for t in e.tables() {
                    let cache = e.cache(t.name())?;
                    total += refresh_cache(&cache, &p, t.name(), batch)?;
                }
                Ok(total)
            }),
        );
        Ok(Self { pdb, vdb, broker, engine, ingestor, refresher, refresh_batch: config.refresh_batch })
    }

    pub fn persistent(&self) -> &Arc<PersistentStore> {
        &self.pdb
    }

    pub fn volatile(&self) -> Option<&Arc<VolatileStore>> {
        self.vdb.as_ref()
    }

    pub fn broker(&self) -> &Arc<UpdateBroker> {
        &self.broker
    }

    pub fn engine(&self) -> &Arc<LookupEngine> {
        &self.engine
    }

    pub fn lookup(&self, table: &str, keys: Vec<EmbeddingKey>) -> Result<LookupResult> {
        let t = self.engine.table(table)?;
        self.engine.lookup(&LookupQuery::new(t, keys))
    }

    pub fn update(&self, table: &str, records: &[(EmbeddingKey, Vec<f32>)]) -> Result<u64> {
        let dim = self.engine.table(table)?.dim();
        for (_, v) in records {
            if v.len() != dim {
                return Err(hps_core::CoreError::DimensionMismatch { expected: dim, actual: v.len() }.into());
            }
        }
        self.broker.produce_pairs(table, records)
    }

    /// Applies every update published so far on `table`, then refreshes
    /// its cache.
    pub fn refresh(&self, table: &str) -> Result<RefreshReport> {
        let cache = self.engine.cache(table)?;
        self.ingestor.catch_up(Some(table))?;
        self.engine.drain();
        refresh_cache(&cache, &self.pdb, table, self.refresh_batch)
    }

    /// Runs the periodic refresh job now over all tables, unless it is
    /// already running.
    pub fn trigger_refresh(&self) -> Option<Result<RefreshReport>> {
        self.refresher.trigger()
    }

    pub fn stats(&self, table: &str) -> Result<StatsBody> {
        let s = self.engine.stats(table)?;
        let c = self.engine.tiers().counters();
        let l = |a: &std::sync::atomic::AtomicU64| a.load(std::sync::atomic::Ordering::Relaxed);
        Ok(StatsBody {
            hit_rate_ppm: (s.hit_rate() * 1e6).round() as u32,
            occupied_slots: s.occupied_slots,
            lookups: s.lookups,
            cache_hits: s.cache_hits,
            cache_misses: s.cache_misses,
            vdb_hits: l(&c.vdb_hits),
            pdb_hits: l(&c.pdb_hits),
            defaults_returned: s.defaults_returned,
            sync_batches: s.sync_batches,
            async_batches: s.async_batches,
        })
    }

    /// Executes one decoded request.
    pub fn handle(&self, req: Request) -> Response {
        let r = match req {
            Request::Lookup { table, keys } => self.lookup(&table, keys).map(|res| {
                let dim = res.dim() as u32;
                Response::Lookup { dim, values: res.values().to_vec(), miss: res.miss_flags }
            }),
            Request::Update { table, records } => self.update(&table, &records).map(|last_seq| Response::Update { last_seq }),
            Request::Refresh { table } => {
                self.refresh(&table).map(|r| Response::Refresh { refreshed: r.refreshed, unresolved: r.unresolved })
            }
            Request::Stats { table } => self.stats(&table).map(Response::Stats),
        };
        r.unwrap_or_else(|e| error_response(&e))
    }

    /// Stops background threads and flushes both logs.
    pub fn shutdown(mut self) -> Result<()> {
        self.refresher.stop();
        self.ingestor.stop();
        self.engine.drain();
        self.broker.flush()?;
        self.pdb.flush()
    }
}

pub fn error_response(e: &Error) -> Response {
    if e.is_tier_fault() {
        Response::tier_fault(e.to_string())
    } else {
        Response::bad_request(e.to_string())
    }
}
