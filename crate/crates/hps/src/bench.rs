//! Batch-lookup benchmark over a power-law key stream.
//!
//! Writes one CSV row per batch:
//!
//! ```text
//! iteration,latency_us,hit_rate,sync_branch,defaults_returned
//! ```
//!
//! followed by a `# steady_state_hit_rate=<x>` comment line, where `x` is
//! the mean hit rate over the last tenth of the batches.

use std::io::Write;
use std::net::ToSocketAddrs;
use std::sync::Arc;
use std::time::Instant;

use hps_core::powerlaw::{PowerLawSampler, PowerLawSpec};
use hps_core::wire::{Response, StatsBody, Status};
use hps_core::{LookupQuery, TableId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cache::{CacheConfig, SlabCache};
use crate::engine::{EngineConfig, InsertPath, LookupEngine};
use crate::error::{Error, Result};
use crate::persistent::PersistentStore;
use crate::service::Client;
use crate::tier::TierChain;
use crate::volatile::{VolatileStore, VolatileTableConfig};

pub const CSV_HEADER: &str = "iteration,latency_us,hit_rate,sync_branch,defaults_returned";

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub alpha: f64,
    pub cache_slabsets: usize,
    pub threshold: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub volatile: bool,
    /// Wait for background inserts after every batch, making the run
    /// deterministic for a given seed.
    pub drain_each_batch: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            alpha: 1.2,
            cache_slabsets: 1563,
            threshold: 0.8,
            batch_size: 1024,
            iterations: 1000,
            seed: 42,
            volatile: true,
            drain_each_batch: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchRecord {
    pub iteration: usize,
    pub latency_us: f64,
    pub hit_rate: f64,
    pub sync: bool,
    pub defaults_returned: usize,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub records: Vec<BatchRecord>,
    /// Batches lost to tier faults.
    pub faults: usize,
}

impl BenchReport {
    /// Mean hit rate over the last `ceil(n / 10)` batches.
    pub fn steady_state_hit_rate(&self) -> f64 {
        tail_mean(&self.records)
    }

    pub fn mean_latency_us(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.latency_us).sum::<f64>() / self.records.len() as f64
    }
}

fn tail_mean(records: &[BatchRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let n = records.len().div_ceil(10);
    records[records.len() - n..].iter().map(|r| r.hit_rate).sum::<f64>() / n as f64
}

/// What one batch reported, with the lookup's own latency.
struct Outcome {
    latency_us: f64,
    hit_rate: f64,
    sync: bool,
    defaults_returned: usize,
}

/// Draws the key stream, calls `step` per batch and writes the CSV. Tier
/// faults are written as comment lines and the run continues.
fn drive(
    keyspace: u64,
    config: &BenchConfig,
    mut out: impl Write,
    mut step: impl FnMut(Vec<u64>) -> Result<Outcome>,
) -> Result<BenchReport> {
    let sampler = PowerLawSampler::new(PowerLawSpec::new(config.alpha, keyspace, config.seed));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    writeln!(out, "{CSV_HEADER}")?;
    let mut records = Vec::with_capacity(config.iterations);
    let mut faults = 0;
    for iteration in 0..config.iterations {
        let keys: Vec<_> = (0..config.batch_size).map(|_| sampler.draw(&mut rng)).collect();
        let o = match step(keys) {
            Ok(o) => o,
            Err(e) if e.is_tier_fault() => {
                faults += 1;
                writeln!(out, "# tier fault at iteration {iteration}: {e}")?;
                continue;
            }
            Err(e) => return Err(e),
        };
        let rec = BatchRecord { iteration, latency_us: o.latency_us, hit_rate: o.hit_rate, sync: o.sync, defaults_returned: o.defaults_returned };
        writeln!(out, "{},{:.3},{:.6},{},{}", rec.iteration, rec.latency_us, rec.hit_rate, rec.sync as u8, rec.defaults_returned)?;
        records.push(rec);
    }
    writeln!(out, "# steady_state_hit_rate={:.6}", tail_mean(&records))?;
    out.flush()?;
    Ok(BenchReport { records, faults })
}

/// Runs `config.iterations` batches in process against `table` (which must
/// already hold keys `0..keyspace`). Latency covers the lookup call only.
pub fn run_benchmark(pdb: Arc<PersistentStore>, table: &TableId, keyspace: u64, config: &BenchConfig, out: impl Write) -> Result<BenchReport> {
    let vdb = if config.volatile {
        let v = Arc::new(VolatileStore::new());
        v.register(table, VolatileTableConfig::default())?;
        Some(v)
    } else {
        None
    };
    let engine = LookupEngine::new(
        EngineConfig { hit_rate_threshold: config.threshold, ..EngineConfig::default() },
        TierChain::new(vdb, pdb),
    );
    engine.register_table(table, CacheConfig::new(config.cache_slabsets, table.dim()), None)?;
    let report = drive(keyspace, config, out, |keys| {
        let query = LookupQuery::new(table.clone(), keys);
        let start = Instant::now();
        let r = engine.lookup_detailed(&query)?;
        let latency_us = start.elapsed().as_secs_f64() * 1e6;
        if config.drain_each_batch {
            engine.drain();
        }
        Ok(Outcome { latency_us, hit_rate: r.hit_rate, sync: r.path == InsertPath::Sync, defaults_returned: r.result.defaults_returned() })
    })?;
    engine.drain();
    Ok(report)
}

/// Client mode: sends each batch to a running server and measures latency
/// end to end over the socket. Hit rate and branch come from the server's
/// counters, so the table should have no other clients during the run.
pub fn run_remote_benchmark(addr: impl ToSocketAddrs, table: &str, keyspace: u64, config: &BenchConfig, out: impl Write) -> Result<BenchReport> {
    let mut client = Client::connect(addr)?;
    let stats = |c: &mut Client| -> Result<StatsBody> {
        match c.stats(table)? {
            Response::Stats(s) => Ok(s),
            other => Err(response_error(other)),
        }
    };
    let mut before = stats(&mut client)?;
    drive(keyspace, config, out, |keys| {
        let start = Instant::now();
        let resp = client.lookup(table, keys)?;
        let latency_us = start.elapsed().as_secs_f64() * 1e6;
        let miss = match resp {
            Response::Lookup { miss, .. } => miss,
            other => return Err(response_error(other)),
        };
        let after = stats(&mut client)?;
        let hits = after.cache_hits - before.cache_hits;
        let misses = after.cache_misses - before.cache_misses;
        let hit_rate = if hits + misses == 0 { 1.0 } else { hits as f64 / (hits + misses) as f64 };
        let sync = after.sync_batches > before.sync_batches;
        before = after;
        Ok(Outcome { latency_us, hit_rate, sync, defaults_returned: miss.iter().filter(|m| **m).count() })
    })
}

fn response_error(resp: Response) -> Error {
    match resp {
        Response::Error { status: Status::TierFault, message } => Error::TierFault(message),
        Response::Error { message, .. } => Error::Remote(message),
        other => Error::Remote(format!("unexpected response {other:?}")),
    }
}

/// Single-context `SlabCache::query` throughput over a warm cache.
/// Returns `(keys_per_second, observed_hit_rate)`.
pub fn cache_query_throughput(slabsets: usize, dim: usize, batch_size: usize, batches: usize, hit_fraction: f64) -> Result<(f64, f64)> {
    let cache = SlabCache::new(CacheConfig::new(slabsets, dim));
    let fill: Vec<u64> = (0..cache.capacity() as u64 * 2).collect();
    for chunk in fill.chunks(4096) {
        cache.replace(chunk, &vec![0.5f32; chunk.len() * dim])?;
    }
    let resident: Vec<u64> = cache.entries().into_iter().map(|e| e.1).collect();
    let hits = ((batch_size as f64) * hit_fraction.clamp(0.0, 1.0)).round() as usize;
    let hits = hits.min(resident.len());
    let mut batch: Vec<u64> = resident.iter().step_by((resident.len() / hits.max(1)).max(1)).take(hits).copied().collect();
    batch.extend((0..(batch_size - batch.len()) as u64).map(|i| u64::MAX - i));
    let mut found = 0usize;
    let start = Instant::now();
    for _ in 0..batches {
        found += std::hint::black_box(cache.query(&batch)).hits();
    }
    let secs = start.elapsed().as_secs_f64();
    let total = batch_size * batches;
    Ok((total as f64 / secs, found as f64 / total as f64))
}
