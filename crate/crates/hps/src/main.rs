use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use hps::bench::{cache_query_throughput, run_benchmark, run_remote_benchmark, BenchConfig};
use hps::node::{Node, NodeConfig};
use hps::persistent::PersistentStore;
use hps::service::{Client, Server};
use hps::workload::{gen_table, write_key_stream};
use hps::Result;
use hps_core::powerlaw::{PowerLawSampler, PowerLawSpec};
use hps_core::wire::Response;
use hps_core::TableId;
use log::info;

#[derive(Parser)]
#[command(name = "hps", version, about = "Hierarchical embedding parameter server")]
struct Cli {
    /// Persistent store root.
    #[arg(long, global = true, env = "HPS_DATA_DIR", default_value = "hps-data")]
    data_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a table of random vectors for keys 0..keys.
    Gen {
        #[arg(long)]
        table: String,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 1_000_000)]
        keys: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Write a power-law key stream as little-endian u64s.
    Sample {
        #[arg(long, default_value_t = 1.2)]
        alpha: f64,
        #[arg(long, default_value_t = 1_000_000)]
        keys: u64,
        #[arg(long, default_value_t = 1_000_000)]
        count: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the batch-lookup benchmark and write per-batch CSV.
    Bench {
        #[arg(long, default_value_t = 1.2)]
        alpha: f64,
        #[arg(long, default_value_t = 1_000_000)]
        keys: u64,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 1563)]
        cache_slabsets: usize,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        #[arg(long, default_value_t = 1024)]
        batch_size: usize,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        no_volatile: bool,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Measure end to end against a running server instead of in process.
        #[arg(long)]
        connect: Option<String>,
        /// Table to query in client mode.
        #[arg(long, requires = "connect")]
        table: Option<String>,
    },
    /// Measure raw cache query throughput on a warm cache.
    CacheThroughput {
        #[arg(long, default_value_t = 1563)]
        cache_slabsets: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 1024)]
        batch_size: usize,
        #[arg(long, default_value_t = 2000)]
        batches: usize,
        #[arg(long, default_value_t = 0.9)]
        hit_fraction: f64,
    },
    /// Serve every table under the store root over TCP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        /// Store root; overrides --data-dir.
        #[arg(long)]
        tables: Option<PathBuf>,
        #[arg(long, default_value_t = 1 << 16)]
        cache_capacity: usize,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        #[arg(long, default_value_t = 10)]
        refresh_interval_secs: u64,
        #[arg(long)]
        no_volatile: bool,
    },
    /// Ask a running server to refresh one table's cache.
    Refresh {
        #[arg(long)]
        table: String,
        #[arg(long, default_value = "127.0.0.1:7070")]
        connect: String,
    },
    /// Print a table's counters from a running server.
    Stats {
        #[arg(long)]
        table: String,
        #[arg(long, default_value = "127.0.0.1:7070")]
        connect: String,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn ensure_table(pdb: &PersistentStore, name: &str, dim: usize, keys: u64, seed: u64) -> Result<TableId> {
    let table = TableId::new(name, dim)?;
    let present = pdb.table(name).is_ok();
    if !present || (pdb.len(name)? as u64) < keys {
        info!("generating `{name}` with {keys} keys of dim {dim}");
        gen_table(pdb, &table, keys, seed)?;
        pdb.flush()?;
    }
    pdb.table(name)?.check_dim(dim)?;
    Ok(table)
}

fn print_response(resp: &Response) {
    match resp {
        Response::Refresh { refreshed, unresolved } => println!("refreshed={refreshed} unresolved={unresolved}"),
        Response::Stats(s) => println!("{s:#?}"),
        Response::Error { status, message } => println!("{status:?}: {message}"),
        other => println!("{other:?}"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen { table, dim, keys, seed } => {
            let pdb = PersistentStore::open(&cli.data_dir)?;
            gen_table(&pdb, &TableId::new(table, dim)?, keys, seed)?;
            pdb.flush()?;
        }
        Cmd::Sample { alpha, keys, count, seed, out } => {
            let sampler = PowerLawSampler::new(PowerLawSpec::new(alpha, keys, seed));
            let sample = sampler.sample(count, seed);
            write_key_stream(&out, &sample)?;
            println!("head_coverage={:.4}", sampler.head_coverage(&sample, 0.1));
        }
        Cmd::Bench { alpha, keys, dim, cache_slabsets, threshold, batch_size, iterations, seed, no_volatile, out, connect, table } => {
            let config = BenchConfig {
                alpha,
                cache_slabsets,
                threshold,
                batch_size,
                iterations,
                seed,
                volatile: !no_volatile,
                drain_each_batch: false,
            };
            let sink: Box<dyn Write> = match out {
                Some(path) => Box::new(BufWriter::new(File::create(path)?)),
                None => Box::new(std::io::stdout().lock()),
            };
            let report = match connect {
                Some(addr) => {
                    let name = table.unwrap_or_else(|| format!("bench-{keys}-{dim}"));
                    run_remote_benchmark(addr.as_str(), &name, keys, &config, sink)?
                }
                None => {
                    let pdb = Arc::new(PersistentStore::open(&cli.data_dir)?);
                    let table = ensure_table(&pdb, &format!("bench-{keys}-{dim}"), dim, keys, seed)?;
                    run_benchmark(pdb, &table, keys, &config, sink)?
                }
            };
            eprintln!(
                "steady_state_hit_rate={:.4} mean_latency_us={:.1}",
                report.steady_state_hit_rate(),
                report.mean_latency_us()
            );
        }
        Cmd::CacheThroughput { cache_slabsets, dim, batch_size, batches, hit_fraction } => {
            let (rate, hit) = cache_query_throughput(cache_slabsets, dim, batch_size, batches, hit_fraction)?;
            println!("keys_per_sec={rate:.0} hit_rate={hit:.3}");
        }
        Cmd::Serve { listen, tables, cache_capacity, threshold, refresh_interval_secs, no_volatile } => {
            let root = tables.unwrap_or(cli.data_dir);
            let pdb = Arc::new(PersistentStore::open(&root)?);
            let mut config = NodeConfig { cache_capacity, refresh_interval: Duration::from_secs(refresh_interval_secs), ..NodeConfig::default() };
            config.engine.hit_rate_threshold = threshold;
            if no_volatile {
                config.volatile = None;
            }
            let node = Arc::new(Node::start(pdb, config)?);
            let names: Vec<String> = node.engine().tables().iter().map(|t| t.to_string()).collect();
            let server = Server::bind(Arc::clone(&node), listen.as_str())?;
            info!("serving {} on {}", names.join(", "), server.local_addr());
            server.wait();
        }
        Cmd::Refresh { table, connect } => {
            let resp = Client::connect(connect.as_str())?.refresh(&table)?;
            print_response(&resp);
        }
        Cmd::Stats { table, connect } => {
            let resp = Client::connect(connect.as_str())?.stats(&table)?;
            print_response(&resp);
        }
    }
    std::io::stdout().flush()?;
    Ok(())
}
