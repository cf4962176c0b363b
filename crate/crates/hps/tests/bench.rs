use std::sync::Arc;
use std::time::Duration;

use hps::bench::{run_benchmark, run_remote_benchmark, BenchConfig, BenchReport, CSV_HEADER};
use hps::node::{Node, NodeConfig};
use hps::persistent::{FaultPoint, PersistentStore};
use hps::service::Server;
use hps::workload::gen_table;
use hps_core::TableId;
use tempfile::TempDir;

const KEYS: u64 = 20_000;

fn store() -> (TempDir, Arc<PersistentStore>, TableId) {
    let dir = TempDir::new().unwrap();
    let pdb = Arc::new(PersistentStore::open(dir.path()).unwrap());
    let t = TableId::new("b", 4).unwrap();
    pdb.create_table(&t).unwrap();
    gen_table(&pdb, &t, KEYS, 3).unwrap();
    (dir, pdb, t)
}

fn config(threshold: f64) -> BenchConfig {
    BenchConfig { cache_slabsets: 16, threshold, batch_size: 256, iterations: 60, seed: 9, drain_each_batch: true, ..BenchConfig::default() }
}

fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn csv_layout_and_footer() {
    let (_d, pdb, t) = store();
    let mut out = Vec::new();
    let report = run_benchmark(pdb, &t, KEYS, &config(0.8), &mut out).unwrap();
    let csv = String::from_utf8(out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let rows = rows(&csv);
    assert_eq!(rows.len(), 60);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 5);
        assert_eq!(r[0], i.to_string());
        assert!(r[3] == "0" || r[3] == "1");
    }
    let footer = csv.lines().last().unwrap();
    let value: f64 = footer.strip_prefix("# steady_state_hit_rate=").unwrap().parse().unwrap();
    assert!((value - report.steady_state_hit_rate()).abs() < 1e-6);
    assert_eq!(report.faults, 0);
}

#[test]
fn threshold_extremes_select_the_branch() {
    let (_d, pdb, t) = store();
    let always_sync = run_benchmark(Arc::clone(&pdb), &t, KEYS, &config(1.0), std::io::sink()).unwrap();
    assert!(always_sync.records.iter().all(|r| r.sync && r.defaults_returned == 0));
    let never_sync = run_benchmark(pdb, &t, KEYS, &config(0.0), std::io::sink()).unwrap();
    assert!(never_sync.records.iter().all(|r| !r.sync));
    assert_eq!(never_sync.records[0].hit_rate, 0.0);
    assert_eq!(never_sync.records[0].defaults_returned, 256);
    assert!(never_sync.records.last().unwrap().hit_rate > 0.0);
}

#[test]
fn identical_seeds_give_identical_hit_rates() {
    let (_d, pdb, t) = store();
    let a = run_benchmark(Arc::clone(&pdb), &t, KEYS, &config(0.8), std::io::sink()).unwrap();
    let b = run_benchmark(pdb, &t, KEYS, &config(0.8), std::io::sink()).unwrap();
    let h = |r: &BenchReport| r.records.iter().map(|x| (x.hit_rate, x.sync, x.defaults_returned)).collect::<Vec<_>>();
    assert_eq!(h(&a), h(&b));
}

#[test]
fn tier_faults_are_recorded_and_the_run_continues() {
    let (_d, pdb, t) = store();
    pdb.inject_fault(FaultPoint::Get);
    let mut out = Vec::new();
    let report = run_benchmark(Arc::clone(&pdb), &t, KEYS, &BenchConfig { volatile: false, ..config(1.0) }, &mut out).unwrap();
    let csv = String::from_utf8(out).unwrap();
    assert!(report.faults >= 1);
    assert_eq!(report.records.len() + report.faults, 60);
    assert!(csv.contains("# tier fault at iteration 0"));
}

#[test]
fn client_mode_matches_in_process_run() {
    let (_d, pdb, t) = store();
    let cfg = config(1.0);
    let local = run_benchmark(Arc::clone(&pdb), &t, KEYS, &cfg, std::io::sink()).unwrap();

    let node_cfg = NodeConfig { cache_capacity: cfg.cache_slabsets * 64, refresh_interval: Duration::from_secs(3600), ..NodeConfig::default() };
    let node = Arc::new(Node::start(pdb, node_cfg).unwrap());
    let server = Server::bind(Arc::clone(&node), "127.0.0.1:0").unwrap();
    let mut out = Vec::new();
    let remote = run_remote_benchmark(server.local_addr(), "b", KEYS, &cfg, &mut out).unwrap();
    assert_eq!(rows(&String::from_utf8(out).unwrap()).len(), 60);
    assert_eq!(remote.records.len(), local.records.len());
    for (l, r) in local.records.iter().zip(&remote.records) {
        assert!((l.hit_rate - r.hit_rate).abs() < 1e-12, "{l:?} {r:?}");
        assert_eq!(l.sync, r.sync);
        assert_eq!(l.defaults_returned, r.defaults_returned);
    }
}
