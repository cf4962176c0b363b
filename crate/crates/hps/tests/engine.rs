mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use common::{flatten, vector_for};
use hps::cache::CacheConfig;
use hps::engine::{EngineConfig, InsertPath, LookupEngine, WorkspacePool};
use hps::persistent::{FaultPoint, PersistentStore};
use hps::tier::TierChain;
use hps::volatile::{VolatileStore, VolatileTableConfig};
use hps_core::{LookupQuery, TableId};
use tempfile::TempDir;

const DIM: usize = 4;
const KEYS: u64 = 5_000;

struct Fixture {
    _dir: TempDir,
    pdb: Arc<PersistentStore>,
    vdb: Arc<VolatileStore>,
    table: TableId,
}

fn fixture() -> Fixture {
    let dir = TempDir::new().unwrap();
    let pdb = Arc::new(PersistentStore::open(dir.path()).unwrap());
    let table = TableId::new("emb", DIM).unwrap();
    pdb.create_table(&table).unwrap();
    let keys: Vec<u64> = (0..KEYS).collect();
    let vals: Vec<Vec<f32>> = keys.iter().map(|&k| vector_for(k, DIM, 0)).collect();
    pdb.put("emb", &keys, &flatten(&vals)).unwrap();
    let vdb = Arc::new(VolatileStore::new());
    vdb.register(&table, VolatileTableConfig::default()).unwrap();
    Fixture { _dir: dir, pdb, vdb, table }
}

fn engine(f: &Fixture, threshold: f64, pool: usize) -> LookupEngine {
    let e = LookupEngine::new(
        EngineConfig { hit_rate_threshold: threshold, workspace_pool_size: pool, async_worker_count: 2 },
        TierChain::new(Some(Arc::clone(&f.vdb)), Arc::clone(&f.pdb)),
    );
    e.register_table(&f.table, CacheConfig::new(64, DIM), None).unwrap();
    e
}

fn q(f: &Fixture, keys: Vec<u64>) -> LookupQuery {
    LookupQuery::new(f.table.clone(), keys)
}

#[test]
fn cold_batch_below_threshold_fetches_synchronously() {
    let f = fixture();
    let e = engine(&f, 1.0, 4);
    let r = e.lookup_detailed(&q(&f, vec![3, 9, 3, 77])).unwrap();
    assert_eq!(r.path, InsertPath::Sync);
    assert_eq!(r.hit_rate, 0.0);
    assert_eq!(r.unique_keys, 3);
    assert_eq!(r.result.defaults_returned(), 0);
    for (i, k) in [3u64, 9, 3, 77].iter().enumerate() {
        assert_eq!(r.result.vector(i), vector_for(*k, DIM, 0).as_slice());
    }
    let again = e.lookup_detailed(&q(&f, vec![3, 9, 77])).unwrap();
    assert_eq!(again.hit_rate, 1.0);
    assert_eq!(again.path, InsertPath::Async);
}

#[test]
fn at_or_above_threshold_returns_defaults_then_inserts() {
    let f = fixture();
    let e = engine(&f, 0.0, 4);
    let r = e.lookup_detailed(&q(&f, vec![10, 11, 12])).unwrap();
    assert_eq!(r.path, InsertPath::Async);
    assert_eq!(r.result.miss_flags, vec![true; 3]);
    assert!(r.result.values().iter().all(|&v| v == 0.0));
    e.drain();
    let r = e.lookup_detailed(&q(&f, vec![10, 11, 12])).unwrap();
    assert_eq!(r.hit_rate, 1.0);
    assert_eq!(r.result.defaults_returned(), 0);
    assert_eq!(r.result.vector(1), vector_for(11, DIM, 0).as_slice());
}

#[test]
fn hit_rate_equal_to_threshold_takes_async_branch() {
    let f = fixture();
    let e = engine(&f, 0.5, 4);
    e.lookup(&q(&f, vec![1, 2])).unwrap();
    let r = e.lookup_detailed(&q(&f, vec![1, 2, 3, 4, 1])).unwrap();
    assert_eq!(r.hit_rate, 0.5);
    assert_eq!(r.path, InsertPath::Async);
    assert_eq!(r.result.miss_flags, vec![false, false, true, true, false]);
    let r = e.lookup_detailed(&q(&f, vec![1, 50, 51, 52])).unwrap();
    assert_eq!(r.hit_rate, 0.25);
    assert_eq!(r.path, InsertPath::Sync);
}

#[test]
fn empty_batch_counts_as_full_hit() {
    let f = fixture();
    let e = engine(&f, 1.0, 1);
    let r = e.lookup_detailed(&q(&f, vec![])).unwrap();
    assert_eq!(r.hit_rate, 1.0);
    assert_eq!(r.path, InsertPath::Async);
    assert!(r.result.is_empty());
    assert_eq!(e.pool().outstanding(), 0);
}

#[test]
fn keys_missing_everywhere_get_the_default_vector() {
    let f = fixture();
    let e = LookupEngine::new(EngineConfig { hit_rate_threshold: 1.0, ..Default::default() }, TierChain::new(None, Arc::clone(&f.pdb)));
    e.register_table(&f.table, CacheConfig::new(8, DIM), Some(vec![9.0; DIM])).unwrap();
    let r = e.lookup(&q(&f, vec![KEYS + 5, 1, KEYS + 5])).unwrap();
    assert_eq!(r.miss_flags, vec![true, false, true]);
    assert_eq!(r.vector(0), &[9.0; DIM]);
    assert_eq!(r.vector(2), &[9.0; DIM]);
    assert_eq!(r.vector(1), vector_for(1, DIM, 0).as_slice());
    let s = e.stats("emb").unwrap();
    assert_eq!((s.lookups, s.cache_misses, s.defaults_returned, s.sync_batches), (1, 2, 2, 1));
}

#[test]
fn tier_fault_surfaces_and_releases_the_workspace() {
    let f = fixture();
    let e = LookupEngine::new(
        EngineConfig { hit_rate_threshold: 1.0, workspace_pool_size: 1, ..Default::default() },
        TierChain::new(None, Arc::clone(&f.pdb)),
    );
    e.register_table(&f.table, CacheConfig::new(8, DIM), None).unwrap();
    f.pdb.inject_fault(FaultPoint::Get);
    let err = e.lookup(&q(&f, vec![1, 2])).unwrap_err();
    assert!(err.is_tier_fault(), "{err}");
    assert_eq!(e.pool().outstanding(), 0);
    assert!(e.lookup(&q(&f, vec![1, 2])).unwrap().miss_flags.iter().all(|m| !m));
}

#[test]
fn sync_fetch_from_persistent_tier_fills_volatile_tier() {
    let f = fixture();
    let e = engine(&f, 1.0, 2);
    e.lookup(&q(&f, vec![100, 200])).unwrap();
    e.drain();
    let got = f.vdb.lookup("emb", &[100, 200, 300]).unwrap();
    assert_eq!(got.keys, vec![100, 200]);
    assert_eq!(got.vector(0), vector_for(100, DIM, 0).as_slice());
}

#[test]
fn rejects_unknown_table_and_wrong_dimension() {
    let f = fixture();
    let e = engine(&f, 0.8, 2);
    let other = LookupQuery::new(TableId::new("nope", DIM).unwrap(), vec![1]);
    assert!(e.lookup(&other).is_err());
    let wrong = LookupQuery::new(TableId::new("emb", DIM + 1).unwrap(), vec![1]);
    assert!(e.lookup(&wrong).is_err());
    assert!(e.register_table(&f.table, CacheConfig::new(8, DIM), None).is_err());
}

#[test]
fn pool_blocks_when_exhausted() {
    let pool = Arc::new(WorkspacePool::new(2));
    let a = pool.request();
    let b = pool.request();
    assert_ne!(a.id(), b.id());
    let done = Arc::new(AtomicBool::new(false));
    let (p, d) = (Arc::clone(&pool), Arc::clone(&done));
    let waiter = std::thread::spawn(move || {
        let ws = p.request();
        d.store(true, Ordering::SeqCst);
        p.release(ws);
    });
    std::thread::sleep(Duration::from_millis(100));
    assert!(!done.load(Ordering::SeqCst));
    pool.release(a);
    waiter.join().unwrap();
    assert!(done.load(Ordering::SeqCst));
    pool.release(b);
    assert_eq!(pool.outstanding(), 0);
    assert_eq!(pool.peak_outstanding(), 2);
}

#[test]
fn concurrent_lookups_never_exceed_the_pool() {
    let f = fixture();
    let e = Arc::new(engine(&f, 0.0, 16));
    std::thread::scope(|s| {
        for t in 0..40u64 {
            let e = Arc::clone(&e);
            let table = f.table.clone();
            s.spawn(move || {
                for i in 0..25u64 {
                    let base = (t * 25 + i) * 4;
                    let keys = (base..base + 64).map(|k| k % KEYS).collect();
                    e.lookup(&LookupQuery::new(table.clone(), keys)).unwrap();
                }
            });
        }
    });
    e.drain();
    assert_eq!(e.stats("emb").unwrap().lookups, 1000);
    assert_eq!(e.pool().outstanding(), 0);
    assert!(e.pool().peak_outstanding() <= 16);
    assert_eq!(e.pool().peak_outstanding(), 16);
}
