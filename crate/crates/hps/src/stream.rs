//! Update stream: one append-only topic per table, consumed by
//! subscriptions that apply messages to the volatile and persistent tiers.
//!
//! Sequence numbers start at 1 and are dense per topic. A subscription's
//! cursor only moves past a batch once both tiers accepted it, so a fault
//! leaves the batch to be retried on the next tick.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use hps_core::hashing::partition_of;
use hps_core::message::{decode_log, UpdateMessage};
use hps_core::{EmbeddingKey, EmbeddingVector, TableId};
use log::{info, warn};
use parking_lot::{Condvar, Mutex, RwLock};

use crate::error::{Error, Result};
use crate::persistent::{check_table_name, PersistentStore};
use crate::volatile::VolatileStore;

pub const DEFAULT_RATE_LIMIT: usize = 1000;
pub const DEFAULT_INGEST_INTERVAL: Duration = Duration::from_millis(100);

struct Topic {
    table: TableId,
    log: RwLock<Vec<UpdateMessage>>,
    file: Option<Mutex<File>>,
}

impl Topic {
    fn last_seq(&self) -> u64 {
        self.log.read().len() as u64
    }
}

/// Holds every topic. With a log directory each topic is mirrored to
/// `<dir>/<table>.topic` and reloaded when the topic is created again.
#[derive(Default)]
pub struct UpdateBroker {
    dir: Option<PathBuf>,
    topics: RwLock<HashMap<String, Arc<Topic>>>,
    batches: AtomicU64,
}

impl UpdateBroker {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn persisted(dir: impl AsRef<Path>) -> Result<Self> {
        std::fs::create_dir_all(dir.as_ref())?;
        Ok(Self { dir: Some(dir.as_ref().to_path_buf()), ..Self::default() })
    }

    /// Creates the topic for `table`, reloading its log file if present.
    /// Creating an existing topic with the same dimension is a no-op.
    pub fn create_topic(&self, table: &TableId) -> Result<()> {
        let mut topics = self.topics.write();
        if let Some(t) = topics.get(table.name()) {
            t.table.check_dim(table.dim())?;
            return Ok(());
        }
        let mut log = Vec::new();
        let file = match &self.dir {
            None => None,
            Some(dir) => {
                check_table_name(table.name())?;
                let path = dir.join(format!("{}.topic", table.name()));
                let bytes = std::fs::read(&path).or_else(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Ok(Vec::new()),
                    _ => Err(e),
                })?;
                let (msgs, end, err) = decode_log(&bytes);
                if let Some(e) = err {
                    warn!("topic `{}`: dropping {} torn bytes ({e})", table.name(), bytes.len() - end);
                }
                for (i, m) in msgs.into_iter().enumerate() {
                    if m.seq != i as u64 + 1 || m.table != *table {
                        return Err(Error::TierFault(format!("topic log `{}` is inconsistent at seq {}", path.display(), i + 1)));
                    }
                    log.push(m);
                }
                let f = OpenOptions::new().create(true).write(true).truncate(false).open(&path)?;
                f.set_len(end as u64)?;
                let mut f = f;
                std::io::Seek::seek(&mut f, std::io::SeekFrom::End(0))?;
                if !log.is_empty() {
                    info!("topic `{}`: reloaded {} messages", table.name(), log.len());
                }
                Some(Mutex::new(f))
            }
        };
        topics.insert(table.name().to_string(), Arc::new(Topic { table: table.clone(), log: RwLock::new(log), file }));
        Ok(())
    }

    fn topic(&self, name: &str) -> Result<Arc<Topic>> {
        self.topics.read().get(name).cloned().ok_or_else(|| Error::UnknownTable(name.to_string()))
    }

    pub fn topics(&self) -> Vec<TableId> {
        let mut v: Vec<_> = self.topics.read().values().map(|t| t.table.clone()).collect();
        v.sort_by(|a, b| a.name().cmp(b.name()));
        v
    }

    /// Appends one message per key. The whole batch is validated before any
    /// sequence number is assigned. Returns the last assigned sequence
    /// number, or the current one for an empty batch.
    pub fn produce(&self, name: &str, keys: &[EmbeddingKey], values: &[f32]) -> Result<u64> {
        let t = self.topic(name)?;
        let dim = t.table.dim();
        if values.len() != keys.len() * dim {
            return Err(Error::Invalid(hps_core::CoreError::LengthMismatch { keys: keys.len(), vectors: values.len() / dim }));
        }
        hps_core::types::check_finite(values)?;
        let mut log = t.log.write();
        if keys.is_empty() {
            return Ok(log.len() as u64);
        }
        let first = log.len() as u64 + 1;
        let msgs: Vec<UpdateMessage> = keys
            .iter()
            .zip(values.chunks_exact(dim))
            .enumerate()
            .map(|(i, (&key, v))| UpdateMessage {
                seq: first + i as u64,
                table: t.table.clone(),
                key,
                vector: EmbeddingVector::from_slice(v).expect("checked finite"),
            })
            .collect();
        if let Some(f) = &t.file {
            let mut buf = Vec::new();
            for m in &msgs {
                m.encode(&mut buf);
            }
            f.lock().write_all(&buf)?;
        }
        log.extend(msgs);
        self.batches.fetch_add(1, Ordering::Relaxed);
        Ok(log.len() as u64)
    }

    pub fn produce_pairs(&self, name: &str, pairs: &[(EmbeddingKey, Vec<f32>)]) -> Result<u64> {
        let keys: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let values: Vec<f32> = pairs.iter().flat_map(|p| p.1.iter().copied()).collect();
        self.produce(name, &keys, &values)
    }

    pub fn last_seq(&self, name: &str) -> Result<u64> {
        Ok(self.topic(name)?.last_seq())
    }

    /// Messages with `seq >= from_seq`, at most `max` of them.
    pub fn read(&self, name: &str, from_seq: u64, max: usize) -> Result<Vec<UpdateMessage>> {
        let t = self.topic(name)?;
        let log = t.log.read();
        let start = (from_seq.max(1) - 1) as usize;
        Ok(log.iter().skip(start).take(max).cloned().collect())
    }

    /// Number of non-empty `produce` calls so far.
    pub fn batches(&self) -> u64 {
        self.batches.load(Ordering::Relaxed)
    }

    pub fn flush(&self) -> Result<()> {
        for t in self.topics.read().values() {
            if let Some(f) = &t.file {
                f.lock().sync_data()?;
            }
        }
        Ok(())
    }

    pub fn subscribe(self: &Arc<Self>, name: &str, from_seq: u64, filter: Option<PartitionFilter>) -> Result<Subscription> {
        self.topic(name)?;
        Ok(Subscription {
            broker: Arc::clone(self),
            topic: name.to_string(),
            next_seq: from_seq.max(1),
            filter,
            rate_limit: DEFAULT_RATE_LIMIT,
        })
    }
}

/// Restricts a subscription to keys whose `partition_of(key, partition_count)`
/// is in `partitions`.
#[derive(Debug, Clone)]
pub struct PartitionFilter {
    pub partitions: BTreeSet<usize>,
    pub partition_count: usize,
}

impl PartitionFilter {
    pub fn new(partitions: impl IntoIterator<Item = usize>, partition_count: usize) -> Self {
        Self { partitions: partitions.into_iter().collect(), partition_count }
    }

    pub fn accepts(&self, key: EmbeddingKey) -> bool {
        self.partitions.contains(&partition_of(key, self.partition_count))
    }
}

pub struct Subscription {
    broker: Arc<UpdateBroker>,
    topic: String,
    next_seq: u64,
    filter: Option<PartitionFilter>,
    rate_limit: usize,
}

impl Subscription {
    pub fn topic(&self) -> &str {
        &self.topic
    }

    pub fn with_rate_limit(mut self, rate_limit: usize) -> Self {
        assert!(rate_limit >= 1);
        self.rate_limit = rate_limit;
        self
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn lag(&self) -> u64 {
        let last = self.broker.last_seq(&self.topic).unwrap_or(0);
        (last + 1).saturating_sub(self.next_seq)
    }

    /// Returns up to `rate_limit` messages past the cursor that pass the
    /// filter, and advances the cursor over everything inspected.
    pub fn poll(&mut self) -> Result<Vec<UpdateMessage>> {
        let (msgs, next) = self.peek()?;
        self.next_seq = next;
        Ok(msgs)
    }

    fn peek(&self) -> Result<(Vec<UpdateMessage>, u64)> {
        let raw = self.broker.read(&self.topic, self.next_seq, self.rate_limit)?;
        let next = raw.last().map_or(self.next_seq, |m| m.seq + 1);
        let msgs = match &self.filter {
            None => raw,
            Some(f) => raw.into_iter().filter(|m| f.accepts(m.key)).collect(),
        };
        Ok((msgs, next))
    }

    /// Applies one batch to the volatile tier (if any), then the persistent
    /// tier. Returns the number of messages applied.
    pub fn ingest_tick(&mut self, vdb: Option<&VolatileStore>, pdb: &PersistentStore) -> Result<usize> {
        let (msgs, next) = self.peek()?;
        if !msgs.is_empty() {
            let keys: Vec<EmbeddingKey> = msgs.iter().map(|m| m.key).collect();
            let values: Vec<f32> = msgs.iter().flat_map(|m| m.vector.as_slice().iter().copied()).collect();
            if let Some(v) = vdb {
                v.insert(&self.topic, &keys, &values)?;
            }
            pdb.put(&self.topic, &keys, &values)?;
        }
        self.next_seq = next;
        Ok(msgs.len())
    }

    /// Ticks until the cursor reaches the end of the topic as seen on entry.
    pub fn catch_up(&mut self, vdb: Option<&VolatileStore>, pdb: &PersistentStore) -> Result<usize> {
        let target = self.broker.last_seq(&self.topic)? + 1;
        let mut applied = 0;
        while self.next_seq < target {
            applied += self.ingest_tick(vdb, pdb)?;
        }
        Ok(applied)
    }
}

struct IngestState {
    subs: Mutex<Vec<Subscription>>,
    vdb: Option<Arc<VolatileStore>>,
    pdb: Arc<PersistentStore>,
    stop: AtomicBool,
    wake: Condvar,
    wake_lock: Mutex<()>,
}

impl IngestState {
    fn tick_all(&self) {
        let mut subs = self.subs.lock();
        for s in subs.iter_mut() {
            if let Err(e) = s.ingest_tick(self.vdb.as_deref(), &self.pdb) {
                warn!("ingest into `{}` failed, will retry: {e}", s.topic());
            }
        }
    }
}

/// Background thread ticking every subscription once per interval.
pub struct Ingestor {
    state: Arc<IngestState>,
    handle: Option<JoinHandle<()>>,
}

impl Ingestor {
    pub fn spawn(subs: Vec<Subscription>, vdb: Option<Arc<VolatileStore>>, pdb: Arc<PersistentStore>, interval: Duration) -> Self {
        let state = Arc::new(IngestState {
            subs: Mutex::new(subs),
            vdb,
            pdb,
            stop: AtomicBool::new(false),
            wake: Condvar::new(),
            wake_lock: Mutex::new(()),
        });
        let st = Arc::clone(&state);
        let handle = std::thread::Builder::new()
            .name("update-ingest".into())
            .spawn(move || {
                while !st.stop.load(Ordering::Acquire) {
                    st.tick_all();
                    let mut g = st.wake_lock.lock();
                    if !st.stop.load(Ordering::Acquire) {
                        st.wake.wait_for(&mut g, interval);
                    }
                }
            })
            .expect("spawn ingest thread");
        Self { state, handle: Some(handle) }
    }

    pub fn add(&self, sub: Subscription) {
        self.state.subs.lock().push(sub);
    }

    /// Applies everything published so far on `topic` (all topics when
    /// `None`) before returning.
    pub fn catch_up(&self, topic: Option<&str>) -> Result<usize> {
        let mut subs = self.state.subs.lock();
        let mut applied = 0;
        for s in subs.iter_mut().filter(|s| topic.is_none_or(|t| s.topic() == t)) {
            applied += s.catch_up(self.state.vdb.as_deref(), &self.state.pdb)?;
        }
        Ok(applied)
    }

    pub fn stop(&mut self) {
        self.state.stop.store(true, Ordering::Release);
        {
            let _g = self.state.wake_lock.lock();
            self.state.wake.notify_all();
        }
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Ingestor {
    fn drop(&mut self) {
        self.stop();
    }
}
