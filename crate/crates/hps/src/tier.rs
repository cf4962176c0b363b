//! Tier plumbing shared by the volatile and persistent stores, and the
//! volatile-then-persistent fetch chain used on cache misses.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use hps_core::EmbeddingKey;

use crate::error::Result;
use crate::persistent::PersistentStore;
use crate::volatile::VolatileStore;

/// Keys a tier could answer (with row-major vectors) and keys it could not.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Fetched {
    pub dim: usize,
    pub keys: Vec<EmbeddingKey>,
    pub values: Vec<f32>,
    pub missing: Vec<EmbeddingKey>,
}

impl Fetched {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Default::default() }
    }

    pub fn push(&mut self, key: EmbeddingKey, value: &[f32]) {
        self.keys.push(key);
        self.values.extend_from_slice(value);
    }

    pub fn found(&self) -> usize {
        self.keys.len()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (EmbeddingKey, &[f32])> + '_ {
        self.keys.iter().enumerate().map(|(i, k)| (*k, self.vector(i)))
    }

    pub fn to_map(&self) -> HashMap<EmbeddingKey, Vec<f32>> {
        self.iter().map(|(k, v)| (k, v.to_vec())).collect()
    }

    fn append(&mut self, other: Fetched) {
        self.keys.extend(other.keys);
        self.values.extend(other.values);
    }
}

#[derive(Debug, Default)]
pub struct TierCounters {
    pub vdb_hits: AtomicU64,
    pub vdb_misses: AtomicU64,
    pub pdb_hits: AtomicU64,
    pub pdb_misses: AtomicU64,
}

/// Cache-miss fallback path: the volatile tier first, then the persistent
/// replica. Vectors found only in the replica are queued for insertion into
/// the volatile tier. Without a volatile tier every fetch goes straight to
/// the replica and returns the same values.
#[derive(Clone)]
pub struct TierChain {
    vdb: Option<Arc<VolatileStore>>,
    pdb: Arc<PersistentStore>,
    counters: Arc<TierCounters>,
}

impl TierChain {
    pub fn new(vdb: Option<Arc<VolatileStore>>, pdb: Arc<PersistentStore>) -> Self {
        Self { vdb, pdb, counters: Arc::default() }
    }

    pub fn volatile(&self) -> Option<&Arc<VolatileStore>> {
        self.vdb.as_ref()
    }

    pub fn persistent(&self) -> &Arc<PersistentStore> {
        &self.pdb
    }

    pub fn counters(&self) -> &TierCounters {
        &self.counters
    }

    pub fn fetch(&self, table: &str, keys: &[EmbeddingKey]) -> Result<Fetched> {
        let (mut found, pending) = match &self.vdb {
            Some(vdb) => {
                let mut f = vdb.lookup(table, keys)?;
                let missing = std::mem::take(&mut f.missing);
                self.counters.vdb_hits.fetch_add(f.found() as u64, Ordering::Relaxed);
                self.counters.vdb_misses.fetch_add(missing.len() as u64, Ordering::Relaxed);
                (f, missing)
            }
            None => (Fetched::new(self.pdb.dim(table)?), keys.to_vec()),
        };
        if pending.is_empty() {
            return Ok(found);
        }
        let from_pdb = self.pdb.get(table, &pending)?;
        self.counters.pdb_hits.fetch_add(from_pdb.found() as u64, Ordering::Relaxed);
        self.counters.pdb_misses.fetch_add(from_pdb.missing.len() as u64, Ordering::Relaxed);
        if let Some(vdb) = &self.vdb {
            if from_pdb.found() > 0 {
                vdb.fill_async(table, from_pdb.keys.clone(), from_pdb.values.clone())?;
            }
        }
        found.missing = from_pdb.missing.clone();
        found.append(from_pdb);
        Ok(found)
    }
}
