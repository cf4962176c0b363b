mod common;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use common::{flatten, vector_for};
use hps::node::{Node, NodeConfig};
use hps::persistent::{FaultPoint, PersistentStore};
use hps::service::{Client, Server};
use hps_core::wire::{Opcode, Request, Response, Status, MAX_FRAME_LEN};
use hps_core::TableId;
use tempfile::TempDir;

const DIM: usize = 4;

fn start(threshold: f64) -> (TempDir, Arc<Node>, Server) {
    let dir = TempDir::new().unwrap();
    let pdb = Arc::new(PersistentStore::open(dir.path()).unwrap());
    let t = TableId::new("emb", DIM).unwrap();
    pdb.create_table(&t).unwrap();
    let keys: Vec<u64> = (0..1_000).collect();
    pdb.put("emb", &keys, &flatten(&keys.iter().map(|&k| vector_for(k, DIM, 0)).collect::<Vec<_>>())).unwrap();
    let mut cfg = NodeConfig { cache_capacity: 512, refresh_interval: Duration::from_secs(3600), ..NodeConfig::default() };
    cfg.engine.hit_rate_threshold = threshold;
    let node = Arc::new(Node::start(pdb, cfg).unwrap());
    let server = Server::bind(Arc::clone(&node), "127.0.0.1:0").unwrap();
    (dir, node, server)
}

fn lookup_values(resp: Response) -> (Vec<f32>, Vec<bool>) {
    match resp {
        Response::Lookup { dim, values, miss } => {
            assert_eq!(dim as usize, DIM);
            (values, miss)
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn lookup_update_refresh_stats_round_trip() {
    let (_dir, _node, server) = start(1.0);
    let mut c = Client::connect(server.local_addr()).unwrap();
    let (values, miss) = lookup_values(c.lookup("emb", vec![5, 6, 5, 5_000]).unwrap());
    assert_eq!(miss, vec![false, false, false, true]);
    assert_eq!(&values[..DIM], vector_for(5, DIM, 0).as_slice());
    assert_eq!(&values[3 * DIM..], &[0.0; DIM]);

    let resp = c.update("emb", vec![(5, vec![7.0; DIM]), (5_000, vec![8.0; DIM])]).unwrap();
    assert_eq!(resp, Response::Update { last_seq: 2 });
    // still the cached value until a refresh
    let (values, _) = lookup_values(c.lookup("emb", vec![5]).unwrap());
    assert_eq!(values, vector_for(5, DIM, 0));
    match c.refresh("emb").unwrap() {
        Response::Refresh { refreshed, unresolved } => {
            assert_eq!(refreshed, 2);
            assert_eq!(unresolved, 0);
        }
        other => panic!("unexpected {other:?}"),
    }
    let (values, miss) = lookup_values(c.lookup("emb", vec![5, 5_000]).unwrap());
    assert_eq!(values, [vec![7.0; DIM], vec![8.0; DIM]].concat());
    assert_eq!(miss, vec![false, false]);

    match c.stats("emb").unwrap() {
        Response::Stats(s) => {
            assert_eq!(s.lookups, 3);
            assert_eq!(s.occupied_slots, 3);
            assert!(s.pdb_hits >= 2);
            assert_eq!(s.defaults_returned, 1);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn bad_requests_keep_the_connection_open() {
    let (_dir, _node, server) = start(0.8);
    let mut c = Client::connect(server.local_addr()).unwrap();
    let mut garbage = Request::Lookup { table: "emb".into(), keys: vec![1] }.to_frame();
    garbage[4] = b'X';
    assert_eq!(c.call_raw(&garbage, Opcode::Lookup).unwrap().status(), Status::BadRequest);
    assert_eq!(c.lookup("nope", vec![1]).unwrap().status(), Status::BadRequest);
    assert_eq!(c.update("emb", vec![(1, vec![1.0; DIM + 1])]).unwrap().status(), Status::BadRequest);
    assert_eq!(c.lookup("emb", vec![1]).unwrap().status(), Status::Ok);
}

#[test]
fn oversize_frame_is_refused_and_connection_closed() {
    let (_dir, _node, server) = start(0.8);
    let mut s = TcpStream::connect(server.local_addr()).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    s.write_all(&((MAX_FRAME_LEN as u32) + 1).to_le_bytes()).unwrap();
    let mut len = [0u8; 4];
    s.read_exact(&mut len).unwrap();
    let mut body = vec![0u8; u32::from_le_bytes(len) as usize];
    s.read_exact(&mut body).unwrap();
    assert_eq!(Response::decode_body(&body, Opcode::Lookup).unwrap().status(), Status::BadRequest);
    let mut rest = Vec::new();
    assert_eq!(s.read_to_end(&mut rest).unwrap(), 0);
}

#[test]
fn tier_fault_is_reported_as_such() {
    let (_dir, node, server) = start(1.0);
    let mut c = Client::connect(server.local_addr()).unwrap();
    node.persistent().inject_fault(FaultPoint::Get);
    assert_eq!(c.lookup("emb", vec![900]).unwrap().status(), Status::TierFault);
    assert_eq!(c.lookup("emb", vec![900]).unwrap().status(), Status::Ok);
}

#[test]
fn many_clients_in_parallel() {
    let (_dir, _node, server) = start(0.8);
    let addr = server.local_addr();
    std::thread::scope(|s| {
        for t in 0..8u64 {
            s.spawn(move || {
                let mut c = Client::connect(addr).unwrap();
                for i in 0..50u64 {
                    let keys: Vec<u64> = (0..16).map(|j| (t * 131 + i * 17 + j) % 1_000).collect();
                    let (values, miss) = lookup_values(c.lookup("emb", keys.clone()).unwrap());
                    for (p, k) in keys.iter().enumerate() {
                        if !miss[p] {
                            assert_eq!(&values[p * DIM..(p + 1) * DIM], vector_for(*k, DIM, 0).as_slice());
                        }
                    }
                }
            });
        }
    });
}
