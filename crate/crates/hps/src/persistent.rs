//! Persistent tier: a full on-disk replica of every table.
//!
//! Layout under the store root:
//!
//! ```text
//! <root>/<table>/MANIFEST        name=, dim=, version=1
//! <root>/<table>/seg-<n>.log     concatenated records, see hps_core::record
//! ```
//!
//! The key index is rebuilt by scanning segments in ascending order at open;
//! the latest `(segment, offset)` for a key wins. A torn record at the end of
//! a segment is cut off at open and reported once. Appends are written
//! before they are indexed, so a failed batch never becomes visible.
//!
//! Compaction writes live records to `seg-<n>.log.tmp` files numbered above
//! every existing segment, syncs them, renames them into place and only then
//! deletes the old segments. The new segments hold exactly the live values,
//! so a crash at any point leaves the logical contents unchanged; leftover
//! `.tmp` files are deleted at open.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use hps_core::record::{decode_record, encode_record, record_len, Manifest};
use hps_core::{DecodeError, EmbeddingKey, TableId};
use log::warn;
use parking_lot::{Mutex, RwLock};

use crate::error::{Error, Result};
use crate::tier::Fetched;

pub const MANIFEST_FILE: &str = "MANIFEST";
pub const DEFAULT_SEGMENT_BYTES: u64 = 64 << 20;

/// One-shot failure injection points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultPoint {
    /// The next `put` fails before writing.
    Put,
    /// The next `get` fails.
    Get,
    /// The next compaction stops after writing its new segments, leaving
    /// them as `.tmp` files the way a crash would.
    CompactBeforeSwap,
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    pub segment_bytes: u64,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self { segment_bytes: DEFAULT_SEGMENT_BYTES }
    }
}

pub struct PersistentStore {
    root: PathBuf,
    options: StoreOptions,
    tables: RwLock<HashMap<String, Arc<TableStore>>>,
    faults: Mutex<Vec<FaultPoint>>,
    reads: AtomicU64,
    recovery: Mutex<Vec<String>>,
}

struct TableStore {
    table: TableId,
    dir: PathBuf,
    inner: RwLock<TableInner>,
}

struct TableInner {
    segments: BTreeMap<u32, File>,
    active: u32,
    active_len: u64,
    index: HashMap<EmbeddingKey, (u32, u64)>,
}

fn segment_name(n: u32) -> String {
    format!("seg-{n}.log")
}

fn parse_segment_name(name: &str) -> Option<u32> {
    name.strip_prefix("seg-")?.strip_suffix(".log")?.parse().ok()
}

/// Table names become directory names, so they are limited to a portable
/// character set.
pub fn check_table_name(name: &str) -> Result<()> {
    let ok = !name.starts_with('.')
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'));
    if ok {
        Ok(())
    } else {
        Err(Error::UnsafeTableName(name.to_string()))
    }
}

impl PersistentStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        Self::open_with(root, StoreOptions::default())
    }

    pub fn open_with(root: impl AsRef<Path>, options: StoreOptions) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let store = Self {
            root,
            options,
            tables: RwLock::default(),
            faults: Mutex::default(),
            reads: AtomicU64::new(0),
            recovery: Mutex::default(),
        };
        let mut dirs: Vec<PathBuf> = fs::read_dir(&store.root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(MANIFEST_FILE).is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let manifest = Manifest::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
            let t = store.open_table(manifest.table, dir)?;
            store.tables.write().insert(t.table.name().to_string(), Arc::new(t));
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Registers a table, or checks the dimension of an existing one.
    pub fn create_table(&self, table: &TableId) -> Result<()> {
        check_table_name(table.name())?;
        let mut tables = self.tables.write();
        if let Some(t) = tables.get(table.name()) {
            t.table.check_dim(table.dim())?;
            return Ok(());
        }
        let dir = self.root.join(table.name());
        fs::create_dir_all(&dir)?;
        let tmp = dir.join("MANIFEST.tmp");
        fs::write(&tmp, Manifest::new(table.clone()).to_text())?;
        File::open(&tmp)?.sync_all()?;
        fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
        let t = self.open_table(table.clone(), dir)?;
        tables.insert(table.name().to_string(), Arc::new(t));
        Ok(())
    }

    pub fn tables(&self) -> Vec<TableId> {
        let mut v: Vec<TableId> = self.tables.read().values().map(|t| t.table.clone()).collect();
        v.sort_by(|a, b| a.name().cmp(b.name()));
        v
    }

    pub fn table(&self, name: &str) -> Result<TableId> {
        Ok(self.handle(name)?.table.clone())
    }

    pub fn dim(&self, name: &str) -> Result<usize> {
        Ok(self.handle(name)?.table.dim())
    }

    /// Messages about torn tails cut off while opening.
    pub fn recovery_reports(&self) -> Vec<String> {
        self.recovery.lock().clone()
    }

    /// Number of record reads served so far.
    pub fn read_count(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn inject_fault(&self, point: FaultPoint) {
        self.faults.lock().push(point);
    }

    fn take_fault(&self, point: FaultPoint) -> bool {
        let mut f = self.faults.lock();
        match f.iter().position(|p| *p == point) {
            Some(i) => {
                f.remove(i);
                true
            }
            None => false,
        }
    }

    fn handle(&self, name: &str) -> Result<Arc<TableStore>> {
        self.tables.read().get(name).cloned().ok_or_else(|| Error::UnknownTable(name.to_string()))
    }

    /// Appends `keys[i] -> values[i*dim..]` records. Later records win.
    pub fn put(&self, name: &str, keys: &[EmbeddingKey], values: &[f32]) -> Result<()> {
        let t = self.handle(name)?;
        let dim = t.table.dim();
        if values.len() != keys.len() * dim {
            return Err(hps_core::CoreError::LengthMismatch { keys: keys.len(), vectors: values.len() / dim }.into());
        }
        hps_core::types::check_finite(values)?;
        if keys.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::with_capacity(keys.len() * record_len(dim));
        for (k, v) in keys.iter().zip(values.chunks_exact(dim)) {
            encode_record(*k, v, &mut buf);
        }
        if self.take_fault(FaultPoint::Put) {
            return Err(Error::TierFault("injected put fault".into()));
        }
        let mut inner = t.inner.write();
        if inner.active_len > 0 && inner.active_len + buf.len() as u64 > self.options.segment_bytes {
            let next = inner.active + 1;
            let f = open_segment(&t.dir, next)?;
            inner.segments.insert(next, f);
            inner.active = next;
            inner.active_len = 0;
        }
        let active = inner.active;
        let start = inner.active_len;
        let file = &inner.segments[&active];
        if let Err(e) = (&*file).write_all(&buf) {
            let _ = file.set_len(start);
            return Err(Error::tier(e));
        }
        inner.active_len += buf.len() as u64;
        let rlen = record_len(dim) as u64;
        for (i, k) in keys.iter().enumerate() {
            inner.index.insert(*k, (active, start + i as u64 * rlen));
        }
        Ok(())
    }

    pub fn put_pairs(&self, name: &str, pairs: &[(EmbeddingKey, Vec<f32>)]) -> Result<()> {
        let keys: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let values: Vec<f32> = pairs.iter().flat_map(|p| p.1.iter().copied()).collect();
        self.put(name, &keys, &values)
    }

    pub fn get(&self, name: &str, keys: &[EmbeddingKey]) -> Result<Fetched> {
        let t = self.handle(name)?;
        if self.take_fault(FaultPoint::Get) {
            return Err(Error::TierFault("injected get fault".into()));
        }
        let dim = t.table.dim();
        let rlen = record_len(dim);
        let mut out = Fetched::new(dim);
        out.values.reserve(keys.len() * dim);
        let mut raw = vec![0u8; rlen];
        let inner = t.inner.read();
        for &k in keys {
            match inner.index.get(&k) {
                Some(&(seg, off)) => {
                    inner.segments[&seg].read_exact_at(&mut raw, off).map_err(Error::tier)?;
                    let rec = decode_record(&raw, dim).map_err(Error::tier)?;
                    out.push(k, &rec.values);
                }
                None => out.missing.push(k),
            }
        }
        self.reads.fetch_add(out.found() as u64, Ordering::Relaxed);
        Ok(out)
    }

    /// All keys of a table, ascending.
    pub fn keys(&self, name: &str) -> Result<Vec<EmbeddingKey>> {
        let t = self.handle(name)?;
        let mut keys: Vec<_> = t.inner.read().index.keys().copied().collect();
        keys.sort_unstable();
        Ok(keys)
    }

    pub fn len(&self, name: &str) -> Result<usize> {
        Ok(self.handle(name)?.inner.read().index.len())
    }

    /// Total bytes across a table's segment files.
    pub fn disk_bytes(&self, name: &str) -> Result<u64> {
        let t = self.handle(name)?;
        let inner = t.inner.read();
        let mut total = 0;
        for f in inner.segments.values() {
            total += f.metadata()?.len();
        }
        Ok(total)
    }

    pub fn segment_count(&self, name: &str) -> Result<usize> {
        Ok(self.handle(name)?.inner.read().segments.len())
    }

    /// Syncs every active segment to disk.
    pub fn flush(&self) -> Result<()> {
        for t in self.tables.read().values() {
            let inner = t.inner.read();
            inner.segments[&inner.active].sync_data()?;
        }
        Ok(())
    }

    /// Rewrites a table's live records into fresh segments.
    pub fn compact(&self, name: &str) -> Result<()> {
        let t = self.handle(name)?;
        let dim = t.table.dim();
        let rlen = record_len(dim) as u64;
        let mut inner = t.inner.write();

        let mut live: Vec<(EmbeddingKey, u32, u64)> = inner.index.iter().map(|(k, (s, o))| (*k, *s, *o)).collect();
        live.sort_unstable_by_key(|e| e.0);

        let first_new = inner.segments.keys().next_back().copied().unwrap_or(0) + 1;
        let mut written: Vec<u32> = Vec::new();
        let mut new_index = HashMap::with_capacity(live.len());
        let mut raw = vec![0u8; rlen as usize];
        let mut seg = first_new;
        let mut buf: Vec<u8> = Vec::new();
        let flush_tmp = |seg: u32, buf: &mut Vec<u8>| -> io::Result<()> {
            let path = t.dir.join(format!("{}.tmp", segment_name(seg)));
            let mut f = File::create(path)?;
            f.write_all(buf)?;
            f.sync_all()?;
            buf.clear();
            Ok(())
        };
        for (key, s, o) in &live {
            if !buf.is_empty() && buf.len() as u64 + rlen > self.options.segment_bytes {
                flush_tmp(seg, &mut buf)?;
                written.push(seg);
                seg += 1;
            }
            inner.segments[s].read_exact_at(&mut raw, *o)?;
            new_index.insert(*key, (seg, buf.len() as u64));
            buf.extend_from_slice(&raw);
        }
        flush_tmp(seg, &mut buf)?;
        written.push(seg);

        if self.take_fault(FaultPoint::CompactBeforeSwap) {
            return Err(Error::TierFault("injected crash before compaction swap".into()));
        }

        for n in &written {
            fs::rename(t.dir.join(format!("{}.tmp", segment_name(*n))), t.dir.join(segment_name(*n)))?;
        }
        sync_dir(&t.dir)?;
        let old: Vec<u32> = inner.segments.keys().copied().collect();
        inner.segments.clear();
        for n in old {
            fs::remove_file(t.dir.join(segment_name(n)))?;
        }
        sync_dir(&t.dir)?;
        for n in &written {
            inner.segments.insert(*n, open_segment(&t.dir, *n)?);
        }
        inner.active = seg;
        inner.active_len = inner.segments[&seg].metadata()?.len();
        inner.index = new_index;
        Ok(())
    }

    fn open_table(&self, table: TableId, dir: PathBuf) -> Result<TableStore> {
        let dim = table.dim();
        let mut numbers = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.ends_with(".tmp") {
                fs::remove_file(entry.path())?;
            } else if let Some(n) = parse_segment_name(&name) {
                numbers.push(n);
            }
        }
        numbers.sort_unstable();

        let mut segments = BTreeMap::new();
        let mut index = HashMap::new();
        for &n in &numbers {
            let file = open_segment(&dir, n)?;
            let data = fs::read(dir.join(segment_name(n)))?;
            let mut pos = 0usize;
            while pos < data.len() {
                match decode_record(&data[pos..], dim) {
                    Ok(rec) => {
                        index.insert(rec.key, (n, pos as u64));
                        pos += rec.len;
                    }
                    Err(e) => {
                        let msg = format!(
                            "{}: {} cut at byte {pos} of {} ({})",
                            table.name(),
                            segment_name(n),
                            data.len(),
                            describe(&e)
                        );
                        warn!("{msg}");
                        self.recovery.lock().push(msg);
                        file.set_len(pos as u64)?;
                        file.sync_data()?;
                        break;
                    }
                }
            }
            segments.insert(n, file);
        }
        let active = match numbers.last() {
            Some(n) => *n,
            None => {
                segments.insert(0, open_segment(&dir, 0)?);
                0
            }
        };
        let active_len = segments[&active].metadata()?.len();
        Ok(TableStore { table, dir, inner: RwLock::new(TableInner { segments, active, active_len, index }) })
    }
}

impl Drop for PersistentStore {
    fn drop(&mut self) {
        if let Err(e) = self.flush() {
            warn!("flush on close failed: {e}");
        }
    }
}

fn describe(e: &DecodeError) -> String {
    match e {
        DecodeError::Truncated { .. } => "torn record".into(),
        other => other.to_string(),
    }
}

fn open_segment(dir: &Path, n: u32) -> io::Result<File> {
    OpenOptions::new().read(true).append(true).create(true).open(dir.join(segment_name(n)))
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}
