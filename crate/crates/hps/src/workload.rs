//! Synthetic tables and key-stream files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use hps_core::{EmbeddingKey, TableId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::persistent::PersistentStore;

const GEN_CHUNK: usize = 16_384;

/// Fills `table` with keys `0..keyspace`, each with a vector drawn
/// uniformly from `[-1, 1)`.
pub fn gen_table(pdb: &PersistentStore, table: &TableId, keyspace: u64, seed: u64) -> Result<()> {
    pdb.create_table(table)?;
    let dim = table.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys = Vec::with_capacity(GEN_CHUNK);
    let mut values = Vec::with_capacity(GEN_CHUNK * dim);
    let mut next = 0u64;
    while next < keyspace {
        keys.clear();
        values.clear();
        let end = (next + GEN_CHUNK as u64).min(keyspace);
        for k in next..end {
            keys.push(k);
            values.extend((0..dim).map(|_| rng.random_range(-1.0f32..1.0)));
        }
        pdb.put(table.name(), &keys, &values)?;
        next = end;
    }
    Ok(())
}

/// Writes keys as consecutive little-endian u64s.
pub fn write_key_stream(path: impl AsRef<Path>, keys: &[EmbeddingKey]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for k in keys {
        w.write_all(&k.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_key_stream(path: impl AsRef<Path>) -> Result<Vec<EmbeddingKey>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Corrupt(hps_core::DecodeError::Malformed("key stream length is not a multiple of 8")));
    }
    Ok(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
}
