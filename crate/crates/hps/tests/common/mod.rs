#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, HashSet};

use hps::volatile::{VolatileStore, VolatileTableConfig};
use hps_core::hashing::partition_of;
use hps_core::TableId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hps_core::hashing::{first_slab_index, slabset_index};
use hps_core::slab::SLAB_SLOTS;

#[derive(Clone, Debug)]
struct Entry {
    key: u64,
    stamp: u64,
    value: Vec<f32>,
}

/// Straightforward model of the slab cache: nested vectors of optional
/// entries, probing written out longhand.
pub struct CacheModel {
    sets: Vec<Vec<Vec<Option<Entry>>>>,
    ways: usize,
    pub counter: u64,
}

enum Found {
    At(usize, usize),
    Empty(usize, usize),
    Full,
}

impl CacheModel {
    pub fn new(slabsets: usize, ways: usize) -> Self {
        Self { sets: vec![vec![vec![None; SLAB_SLOTS]; ways]; slabsets], ways, counter: 0 }
    }

    fn find(&self, key: u64) -> (usize, Found) {
        let s = slabset_index(key, self.sets.len());
        let first = first_slab_index(key, self.ways);
        for i in 0..self.ways {
            let slab = (first + i) % self.ways;
            let slots = &self.sets[s][slab];
            if let Some(j) = slots.iter().position(|e| e.as_ref().is_some_and(|e| e.key == key)) {
                return (s, Found::At(slab, j));
            }
            if let Some(j) = slots.iter().position(|e| e.is_none()) {
                return (s, Found::Empty(slab, j));
            }
        }
        (s, Found::Full)
    }

    pub fn query(&mut self, keys: &[u64]) -> Vec<Option<Vec<f32>>> {
        self.counter += 1;
        let stamp = self.counter;
        keys.iter()
            .map(|&k| match self.find(k) {
                (s, Found::At(a, b)) => {
                    let e = self.sets[s][a][b].as_mut().unwrap();
                    e.stamp = stamp;
                    Some(e.value.clone())
                }
                _ => None,
            })
            .collect()
    }

    pub fn replace(&mut self, keys: &[u64], values: &[Vec<f32>]) -> Vec<u64> {
        let stamp = self.counter;
        let mut evicted = Vec::new();
        for (&k, v) in keys.iter().zip(values) {
            let entry = Entry { key: k, stamp, value: v.clone() };
            match self.find(k) {
                (s, Found::At(a, b)) => self.sets[s][a][b].as_mut().unwrap().stamp = stamp,
                (s, Found::Empty(a, b)) => self.sets[s][a][b] = Some(entry),
                (s, Found::Full) => {
                    let mut best = (u64::MAX, 0, 0);
                    for a in 0..self.ways {
                        for b in 0..SLAB_SLOTS {
                            let st = self.sets[s][a][b].as_ref().unwrap().stamp;
                            if st < best.0 {
                                best = (st, a, b);
                            }
                        }
                    }
                    evicted.push(self.sets[s][best.1][best.2].as_ref().unwrap().key);
                    self.sets[s][best.1][best.2] = Some(entry);
                }
            }
        }
        evicted
    }

    pub fn update(&mut self, keys: &[u64], values: &[Vec<f32>]) -> usize {
        let mut n = 0;
        for (&k, v) in keys.iter().zip(values) {
            if let (s, Found::At(a, b)) = self.find(k) {
                self.sets[s][a][b].as_mut().unwrap().value = v.clone();
                n += 1;
            }
        }
        n
    }

    /// `(slabset, key, stamp)` in (slab, slot) order per slabset.
    pub fn entries(&self) -> Vec<(usize, u64, u64)> {
        let mut out = Vec::new();
        for (s, set) in self.sets.iter().enumerate() {
            for slab in set {
                for e in slab.iter().flatten() {
                    out.push((s, e.key, e.stamp));
                }
            }
        }
        out
    }
}

/// Fully associative LRU of fixed capacity fed batch by batch: hits are
/// counted over the unique keys of a batch before its misses are inserted.
pub struct IdealLru {
    capacity: usize,
    last_use: HashMap<u64, u64>,
    order: BTreeSet<(u64, u64)>,
    clock: u64,
}

impl IdealLru {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, last_use: HashMap::new(), order: BTreeSet::new(), clock: 0 }
    }

    /// Returns the batch hit rate over unique keys.
    pub fn batch(&mut self, keys: &[u64]) -> f64 {
        self.clock += 1;
        let mut seen = HashSet::new();
        let unique: Vec<u64> = keys.iter().copied().filter(|k| seen.insert(*k)).collect();
        if unique.is_empty() {
            return 1.0;
        }
        let mut hits = 0;
        let mut misses = Vec::new();
        for &k in &unique {
            if let Some(t) = self.last_use.get(&k).copied() {
                hits += 1;
                self.order.remove(&(t, k));
                self.order.insert((self.clock, k));
                self.last_use.insert(k, self.clock);
            } else {
                misses.push(k);
            }
        }
        for k in misses {
            if self.last_use.len() == self.capacity {
                let (t, old) = *self.order.iter().next().unwrap();
                self.order.remove(&(t, old));
                self.last_use.remove(&old);
            }
            self.order.insert((self.clock, k));
            self.last_use.insert(k, self.clock);
        }
        hits as f64 / unique.len() as f64
    }
}

/// Deterministic vector for a key, for tests that need to recognise values.
pub fn vector_for(key: u64, dim: usize, salt: u32) -> Vec<f32> {
    (0..dim).map(|i| ((key % 100_003) as f32) * 0.001 + i as f32 + salt as f32 * 1000.0).collect()
}

pub fn flatten(vs: &[Vec<f32>]) -> Vec<f32> {
    vs.iter().flatten().copied().collect()
}

/// Timestamp model: one clock tick per call, lookups raise the access time
/// of resident keys, inserts set it, partitions prune the smallest
/// `(timestamp, key)` pairs beyond the margin after each insert. Checks
/// every returned value, every eviction victim, and partition sizes after
/// every operation. Returns the number of evictions seen.
pub fn run_volatile_oracle(ops: usize, partitions: usize, margin: usize, universe: u64, seed: u64) -> usize {
    const DIM: usize = 3;
    let table = TableId::new("t", DIM).unwrap();
    let vdb = VolatileStore::new();
    vdb.register(&table, VolatileTableConfig { partition_count: partitions, overflow_margin: margin, ..Default::default() })
        .unwrap();
    let mut values: Vec<HashMap<u64, (u64, Vec<f32>)>> = vec![HashMap::new(); partitions];
    let mut order: Vec<BTreeSet<(u64, u64)>> = vec![BTreeSet::new(); partitions];
    let mut clock = 0u64;
    let mut evictions = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for op in 0..ops {
        clock += 1;
        let n = rng.random_range(1..32);
        let keys: Vec<u64> = (0..n).map(|_| rng.random_range(0..universe)).collect();
        if rng.random_bool(0.5) {
            let got = vdb.lookup("t", &keys).unwrap();
            vdb.drain();
            let mut want = Vec::new();
            for &k in &keys {
                let p = partition_of(k, partitions);
                if let Some((ts, v)) = values[p].get_mut(&k) {
                    order[p].remove(&(*ts, k));
                    *ts = clock;
                    order[p].insert((clock, k));
                    want.push((k, v.clone()));
                }
            }
            let got: Vec<(u64, Vec<f32>)> = got.iter().map(|(k, v)| (k, v.to_vec())).collect();
            assert_eq!(got, want, "op {op}");
        } else {
            let vals: Vec<Vec<f32>> = keys.iter().map(|&k| vector_for(k, DIM, op as u32)).collect();
            let mut evicted = vdb.insert("t", &keys, &flatten(&vals)).unwrap();
            let mut touched = BTreeSet::new();
            for (&k, v) in keys.iter().zip(&vals) {
                let p = partition_of(k, partitions);
                if let Some((ts, _)) = values[p].insert(k, (clock, v.clone())) {
                    order[p].remove(&(ts, k));
                }
                order[p].insert((clock, k));
                touched.insert(p);
            }
            let mut want = Vec::new();
            for p in touched {
                while order[p].len() > margin {
                    let (_, k) = order[p].pop_first().unwrap();
                    values[p].remove(&k);
                    want.push(k);
                }
            }
            evictions += want.len();
            evicted.sort_unstable();
            want.sort_unstable();
            assert_eq!(evicted, want, "op {op}");
        }
        let sizes = vdb.partition_sizes("t").unwrap();
        assert!(sizes.iter().all(|&s| s <= margin), "op {op}: {sizes:?}");
    }
    let mut got = vdb.scan("t").unwrap();
    got.sort_unstable();
    let mut want: Vec<(usize, u64, u64)> =
        values.iter().enumerate().flat_map(|(p, m)| m.iter().map(move |(k, (ts, _))| (p, *k, *ts))).collect();
    want.sort_unstable();
    assert_eq!(got, want);
    evictions
}
