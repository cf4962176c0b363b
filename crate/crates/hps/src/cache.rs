//! Concurrent set-associative embedding cache.
//!
//! The cache is an array of [`SlabSet`]s, each behind its own mutex. A key
//! may only live in the slabset picked by [`slabset_index`], so every
//! operation on a key holds exactly one slabset lock and never nests locks.
//!
//! Batches are bucketed by slabset and cut into groups of at least
//! `tasks_per_worker` keys, never splitting a slabset. `worker_pool_size`
//! workers drain the groups from a shared cursor. Keys of one slabset are
//! always handled by one worker in input order, so results do not depend on
//! the worker count.
//!
//! Recency uses a global counter bumped once per [`SlabCache::query`] call.
//! Replace stamps slots with the current counter value; update leaves stamps
//! alone.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use hps_core::dedup::first_duplicate;
use hps_core::hashing::{first_slab_index, slabset_index};
use hps_core::slab::{ReplaceOutcome, SlabSet, DEFAULT_WAYS, SLAB_SLOTS};
use hps_core::{CoreError, EmbeddingKey};
use parking_lot::Mutex;

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct CacheConfig {
    pub slabsets: usize,
    pub ways: usize,
    pub dim: usize,
    pub worker_pool_size: usize,
    pub tasks_per_worker: usize,
    /// Log every per-key operation per slabset, in lock order.
    pub record_history: bool,
}

impl CacheConfig {
    pub fn new(slabsets: usize, dim: usize) -> Self {
        Self { slabsets, ways: DEFAULT_WAYS, dim, worker_pool_size: 1, tasks_per_worker: 256, record_history: false }
    }

    /// Smallest slabset count whose capacity reaches `slots`.
    pub fn for_capacity(slots: usize, dim: usize) -> Self {
        Self::new(slots.div_ceil(DEFAULT_WAYS * SLAB_SLOTS).max(1), dim)
    }

    pub fn capacity(&self) -> usize {
        self.slabsets * self.ways * SLAB_SLOTS
    }
}

/// One per-key operation as applied under a slabset lock.
#[derive(Debug, Clone, PartialEq)]
pub enum SetEvent {
    Query { key: EmbeddingKey, stamp: u64, hit: bool },
    Replace { key: EmbeddingKey, stamp: u64, outcome: ReplaceOutcome },
    Update { key: EmbeddingKey, applied: bool },
}

struct SetState {
    set: SlabSet,
    history: Option<Vec<SetEvent>>,
}

impl SetState {
    fn log(&mut self, event: impl FnOnce() -> SetEvent) {
        if let Some(h) = &mut self.history {
            h.push(event());
        }
    }
}

/// Result of a batch query. Positions index the input key slice.
#[derive(Debug, Clone, Default)]
pub struct QueryOutput {
    dim: usize,
    /// Row-major vectors; rows of missed positions are zero.
    pub values: Vec<f32>,
    pub hit: Vec<bool>,
    /// Missed `(position, key)` pairs in position order.
    pub misses: Vec<(usize, EmbeddingKey)>,
}

impl QueryOutput {
    pub fn get(&self, position: usize) -> Option<&[f32]> {
        self.hit[position].then(|| &self.values[position * self.dim..(position + 1) * self.dim])
    }

    pub fn hits(&self) -> usize {
        self.hit.len() - self.misses.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplaceStats {
    pub inserted: usize,
    pub refreshed: usize,
    /// Keys pushed out by LRU replacement.
    pub evicted: Vec<EmbeddingKey>,
}

pub struct SlabCache {
    sets: Box<[Mutex<SetState>]>,
    counter: AtomicU64,
    config: CacheConfig,
}

impl SlabCache {
    pub fn new(config: CacheConfig) -> Self {
        assert!(config.slabsets >= 1, "cache needs at least one slabset");
        assert!(config.ways >= 1 && config.dim >= 1);
        assert!(config.worker_pool_size >= 1 && config.tasks_per_worker >= 1);
        let sets = (0..config.slabsets)
            .map(|_| {
                Mutex::new(SetState {
                    set: SlabSet::new(config.ways, config.dim),
                    history: config.record_history.then(Vec::new),
                })
            })
            .collect();
        Self { sets, counter: AtomicU64::new(0), config }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn capacity(&self) -> usize {
        self.config.capacity()
    }

    pub fn slabsets(&self) -> usize {
        self.sets.len()
    }

    /// Current value of the global recency counter.
    pub fn counter(&self) -> u64 {
        self.counter.load(Ordering::Acquire)
    }

    pub fn set_of(&self, key: EmbeddingKey) -> usize {
        slabset_index(key, self.sets.len())
    }

    pub fn occupied(&self) -> usize {
        self.sets.iter().map(|s| s.lock().set.occupied()).sum()
    }

    /// Looks up deduplicated keys. Bumps the global counter once.
    pub fn query(&self, keys: &[EmbeddingKey]) -> QueryOutput {
        let stamp = self.counter.fetch_add(1, Ordering::AcqRel) + 1;
        let dim = self.config.dim;
        let mut out = QueryOutput { dim, values: vec![0.0; keys.len() * dim], hit: vec![false; keys.len()], misses: Vec::new() };
        let parts = self.run_groups(keys, |positions| {
            let mut values = vec![0.0f32; positions.len() * dim];
            let mut hit = vec![false; positions.len()];
            for (i, &pos) in positions.iter().enumerate() {
                let key = keys[pos];
                let mut state = self.sets[self.set_of(key)].lock();
                let h = state.set.query(key, first_slab_index(key, self.config.ways), stamp, &mut values[i * dim..(i + 1) * dim]);
                state.log(|| SetEvent::Query { key, stamp, hit: h });
                hit[i] = h;
            }
            (positions.to_vec(), values, hit)
        });
        for (positions, values, hit) in parts {
            for (i, &pos) in positions.iter().enumerate() {
                out.values[pos * dim..(pos + 1) * dim].copy_from_slice(&values[i * dim..(i + 1) * dim]);
                out.hit[pos] = hit[i];
            }
        }
        out.misses = out.hit.iter().enumerate().filter(|(_, h)| !**h).map(|(p, _)| (p, keys[p])).collect();
        out
    }

    /// Inserts keys that are not resident, evicting LRU slots when a
    /// slabset is full. Resident keys only get their stamp refreshed.
    pub fn replace(&self, keys: &[EmbeddingKey], values: &[f32]) -> Result<ReplaceStats> {
        self.check_batch(keys, values)?;
        let stamp = self.counter();
        let dim = self.config.dim;
        let parts = self.run_groups(keys, |positions| {
            let mut stats = ReplaceStats::default();
            for &pos in positions {
                let key = keys[pos];
                let mut state = self.sets[self.set_of(key)].lock();
                let outcome = state.set.replace(key, first_slab_index(key, self.config.ways), stamp, &values[pos * dim..(pos + 1) * dim]);
                state.log(|| SetEvent::Replace { key, stamp, outcome });
                match outcome {
                    ReplaceOutcome::Refreshed => stats.refreshed += 1,
                    ReplaceOutcome::Inserted => stats.inserted += 1,
                    ReplaceOutcome::Evicted(old) => {
                        stats.inserted += 1;
                        stats.evicted.push(old);
                    }
                }
            }
            stats
        });
        Ok(parts.into_iter().fold(ReplaceStats::default(), |mut acc, s| {
            acc.inserted += s.inserted;
            acc.refreshed += s.refreshed;
            acc.evicted.extend(s.evicted);
            acc
        }))
    }

    /// Overwrites vectors of resident keys; everything else is ignored.
    /// Returns the number of overwritten slots.
    pub fn update(&self, keys: &[EmbeddingKey], values: &[f32]) -> Result<usize> {
        self.check_batch(keys, values)?;
        let dim = self.config.dim;
        let parts = self.run_groups(keys, |positions| {
            let mut n = 0;
            for &pos in positions {
                let key = keys[pos];
                let mut state = self.sets[self.set_of(key)].lock();
                let applied = state.set.update(key, first_slab_index(key, self.config.ways), &values[pos * dim..(pos + 1) * dim]);
                state.log(|| SetEvent::Update { key, applied });
                n += applied as usize;
            }
            n
        });
        Ok(parts.into_iter().sum())
    }

    /// Streams resident keys in batches of at most `batch_size`. Each
    /// slabset is read under its lock; the dump as a whole is not atomic.
    pub fn dump(&self, batch_size: usize) -> CacheDump<'_> {
        assert!(batch_size >= 1, "batch_size must be positive");
        CacheDump { cache: self, next_set: 0, pending: Vec::new(), batch_size }
    }

    /// Snapshot of `(slabset, key, stamp)` for every occupied slot.
    pub fn entries(&self) -> Vec<(usize, EmbeddingKey, u64)> {
        let mut out = Vec::new();
        for (i, s) in self.sets.iter().enumerate() {
            out.extend(s.lock().set.entries().map(|(k, c)| (i, k, c)));
        }
        out
    }

    /// Takes the recorded per-slabset histories (empty unless enabled).
    pub fn take_history(&self) -> Vec<Vec<SetEvent>> {
        self.sets.iter().map(|s| s.lock().history.as_mut().map(std::mem::take).unwrap_or_default()).collect()
    }

    fn check_batch(&self, keys: &[EmbeddingKey], values: &[f32]) -> Result<()> {
        let dim = self.config.dim;
        if values.len() != keys.len() * dim {
            if keys.is_empty() || !values.len().is_multiple_of(keys.len()) {
                return Err(CoreError::LengthMismatch { keys: keys.len(), vectors: values.len() / dim }.into());
            }
            return Err(CoreError::DimensionMismatch { expected: dim, actual: values.len() / keys.len() }.into());
        }
        if let Some(k) = first_duplicate(keys) {
            return Err(CoreError::DuplicateKey(k).into());
        }
        Ok(())
    }

    /// Runs `work` over groups of positions on the worker pool and collects
    /// the per-group results.
    fn run_groups<T, F>(&self, keys: &[EmbeddingKey], work: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&[usize]) -> T + Sync,
    {
        let n = keys.len();
        let chunk = self.config.tasks_per_worker;
        if self.config.worker_pool_size <= 1 || n <= chunk {
            let all: Vec<usize> = (0..n).collect();
            return vec![work(&all)];
        }
        let sets = self.sets.len();
        let set_of: Vec<usize> = keys.iter().map(|&k| self.set_of(k)).collect();
        let mut starts = vec![0usize; sets + 1];
        for &s in &set_of {
            starts[s + 1] += 1;
        }
        for s in 0..sets {
            starts[s + 1] += starts[s];
        }
        let mut order = vec![0usize; n];
        let mut fill = starts.clone();
        for (pos, &s) in set_of.iter().enumerate() {
            order[fill[s]] = pos;
            fill[s] += 1;
        }
        let mut bounds = vec![0];
        for &end in &starts[1..] {
            if end - bounds[bounds.len() - 1] >= chunk {
                bounds.push(end);
            }
        }
        if bounds[bounds.len() - 1] < n {
            bounds.push(n);
        }
        let groups = bounds.len() - 1;
        let workers = self.config.worker_pool_size.min(groups);
        let cursor = AtomicUsize::new(0);
        let results = Mutex::new(Vec::with_capacity(groups));
        let worker = || loop {
            let g = cursor.fetch_add(1, Ordering::Relaxed);
            if g >= groups {
                break;
            }
            let r = work(&order[bounds[g]..bounds[g + 1]]);
            results.lock().push(r);
        };
        std::thread::scope(|s| {
            for _ in 1..workers {
                s.spawn(worker);
            }
            worker();
        });
        results.into_inner()
    }
}

pub struct CacheDump<'a> {
    cache: &'a SlabCache,
    next_set: usize,
    pending: Vec<EmbeddingKey>,
    batch_size: usize,
}

impl Iterator for CacheDump<'_> {
    type Item = Vec<EmbeddingKey>;

    fn next(&mut self) -> Option<Vec<EmbeddingKey>> {
        while self.pending.len() < self.batch_size && self.next_set < self.cache.sets.len() {
            let state = self.cache.sets[self.next_set].lock();
            self.pending.extend(state.set.keys());
            drop(state);
            self.next_set += 1;
        }
        if self.pending.is_empty() {
            return None;
        }
        let take = self.pending.len().min(self.batch_size);
        let rest = self.pending.split_off(take);
        Some(std::mem::replace(&mut self.pending, rest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache(slabsets: usize) -> SlabCache {
        SlabCache::new(CacheConfig::new(slabsets, 2))
    }

    #[test]
    fn cold_query_misses() {
        let c = cache(4);
        let out = c.query(&[42]);
        assert_eq!(out.misses, vec![(0, 42)]);
        assert_eq!(c.counter(), 1);
        assert!(c.query(&[]).misses.is_empty());
        assert_eq!(c.counter(), 2);
    }

    #[test]
    fn insert_then_hit_stamps_slot() {
        let c = cache(4);
        c.replace(&[42], &[1.0, 2.0]).unwrap();
        let out = c.query(&[42]);
        assert_eq!(out.get(0), Some(&[1.0, 2.0][..]));
        assert!(out.misses.is_empty());
        let (_, _, stamp) = c.entries()[0];
        assert_eq!(stamp, c.counter());
    }

    #[test]
    fn replace_rejects_bad_batches_without_mutation() {
        let c = cache(4);
        assert!(c.replace(&[1], &[1.0]).is_err());
        assert!(c.replace(&[1, 1], &[1.0; 4]).is_err());
        assert!(c.update(&[1, 2], &[1.0; 2]).is_err());
        assert_eq!(c.occupied(), 0);
    }

    #[test]
    fn existing_key_keeps_original_vector() {
        let c = cache(4);
        c.replace(&[7], &[1.0, 1.0]).unwrap();
        let s = c.replace(&[7], &[9.0, 9.0]).unwrap();
        assert_eq!(s.refreshed, 1);
        assert_eq!(c.query(&[7]).get(0), Some(&[1.0, 1.0][..]));
    }

    #[test]
    fn update_is_intersection_only() {
        let c = cache(4);
        assert_eq!(c.update(&[5], &[3.0, 3.0]).unwrap(), 0);
        assert_eq!(c.occupied(), 0);
        c.replace(&[5], &[1.0, 1.0]).unwrap();
        assert_eq!(c.update(&[5, 6], &[3.0, 3.0, 4.0, 4.0]).unwrap(), 1);
        assert_eq!(c.query(&[5]).get(0), Some(&[3.0, 3.0][..]));
        assert_eq!(c.occupied(), 1);
    }

    #[test]
    fn dump_batches() {
        let c = cache(4);
        assert_eq!(c.dump(2).count(), 0);
        c.replace(&[1, 2, 3], &[0.0; 6]).unwrap();
        let batches: Vec<_> = c.dump(2).collect();
        let mut sizes: Vec<_> = batches.iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![1, 2]);
        let mut all: Vec<_> = batches.concat();
        all.sort();
        assert_eq!(all, vec![1, 2, 3]);
    }

    #[test]
    fn worker_pool_matches_single_worker_on_disjoint_sets() {
        let mut cfg = CacheConfig::new(64, 1);
        cfg.worker_pool_size = 4;
        cfg.tasks_per_worker = 8;
        let par = SlabCache::new(cfg);
        let seq = SlabCache::new(CacheConfig::new(64, 1));
        let keys: Vec<u64> = (0..500).collect();
        let vals: Vec<f32> = keys.iter().map(|k| *k as f32).collect();
        par.replace(&keys, &vals).unwrap();
        seq.replace(&keys, &vals).unwrap();
        let probe: Vec<u64> = (0..1000).collect();
        let a = par.query(&probe);
        let b = seq.query(&probe);
        assert_eq!(a.hit, b.hit);
        assert_eq!(a.values, b.values);
        assert_eq!(a.misses, b.misses);
    }
}
