mod common;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use common::{flatten, run_volatile_oracle, vector_for};
use hps::persistent::PersistentStore;
use hps::tier::TierChain;
use hps::volatile::{VolatileStore, VolatileTableConfig};
use hps_core::TableId;
use proptest::prelude::*;
use tempfile::TempDir;

const DIM: usize = 3;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// The chain answers from the volatile tier first, then the persistent
    /// tier, and reports what neither has.
    #[test]
    fn fetch_is_the_ordered_union_of_both_tiers(
        in_vdb in proptest::collection::btree_set(0u64..200, 0..80),
        in_pdb in proptest::collection::btree_set(0u64..200, 0..80),
        query in proptest::collection::btree_set(0u64..220, 0..60),
    ) {
        let dir = TempDir::new().unwrap();
        let table = TableId::new("t", DIM).unwrap();
        let pdb = Arc::new(PersistentStore::open(dir.path()).unwrap());
        pdb.create_table(&table).unwrap();
        let pk: Vec<u64> = in_pdb.iter().copied().collect();
        pdb.put("t", &pk, &flatten(&pk.iter().map(|&k| vector_for(k, DIM, 2)).collect::<Vec<_>>())).unwrap();
        let vdb = Arc::new(VolatileStore::new());
        vdb.register(&table, VolatileTableConfig::default()).unwrap();
        let vk: Vec<u64> = in_vdb.iter().copied().collect();
        vdb.insert("t", &vk, &flatten(&vk.iter().map(|&k| vector_for(k, DIM, 1)).collect::<Vec<_>>())).unwrap();

        let chain = TierChain::new(Some(Arc::clone(&vdb)), Arc::clone(&pdb));
        let keys: Vec<u64> = query.iter().copied().collect();
        let got = chain.fetch("t", &keys).unwrap();

        let mut want_found = HashMap::new();
        let mut want_missing = BTreeSet::new();
        for &k in &keys {
            if in_vdb.contains(&k) {
                want_found.insert(k, vector_for(k, DIM, 1));
            } else if in_pdb.contains(&k) {
                want_found.insert(k, vector_for(k, DIM, 2));
            } else {
                want_missing.insert(k);
            }
        }
        prop_assert_eq!(got.to_map(), want_found);
        prop_assert_eq!(got.missing.iter().copied().collect::<BTreeSet<_>>(), want_missing);
        prop_assert_eq!(got.keys.len() + got.missing.len(), keys.len());

        vdb.drain();
        for &k in &keys {
            if in_pdb.contains(&k) || in_vdb.contains(&k) {
                prop_assert!(vdb.last_access("t", k).unwrap().is_some(), "key {} not promoted", k);
            }
        }
    }
}

#[test]
fn fill_never_overwrites_a_newer_value() {
    let table = TableId::new("t", DIM).unwrap();
    let vdb = VolatileStore::new();
    vdb.register(&table, VolatileTableConfig::default()).unwrap();
    vdb.insert("t", &[7], &vector_for(7, DIM, 9)).unwrap();
    vdb.fill_async("t", vec![7, 8], flatten(&[vector_for(7, DIM, 1), vector_for(8, DIM, 1)])).unwrap();
    vdb.drain();
    let got = vdb.lookup("t", &[7, 8]).unwrap().to_map();
    assert_eq!(got[&7], vector_for(7, DIM, 9));
    assert_eq!(got[&8], vector_for(8, DIM, 1));
}

#[test]
fn volatile_tier_matches_timestamp_model() {
    assert!(run_volatile_oracle(5_000, 4, 50, 2_000, 11) > 0);
}

#[test]
fn volatile_tier_single_partition() {
    assert!(run_volatile_oracle(3_000, 1, 20, 300, 12) > 0);
}

#[test]
fn preload_loads_requested_share() {
    let dir = TempDir::new().unwrap();
    let table = TableId::new("t", DIM).unwrap();
    let pdb = PersistentStore::open(dir.path()).unwrap();
    pdb.create_table(&table).unwrap();
    let keys: Vec<u64> = (0..1_000).collect();
    pdb.put("t", &keys, &vec![0.25; keys.len() * DIM]).unwrap();
    let vdb = VolatileStore::new();
    vdb.register(&table, VolatileTableConfig::default()).unwrap();
    assert_eq!(vdb.preload("t", &pdb, 0.3).unwrap(), 300);
    assert_eq!(vdb.len("t").unwrap(), 300);
}
