//! Fixed XXH64-based placement functions.
//!
//! All three hash the 8-byte little-endian encoding of the key, so placement
//! is reproducible across runs, platforms and processes.

use xxhash_rust::xxh64::xxh64;

use crate::types::EmbeddingKey;

pub const SLABSET_SEED: u64 = 0x5EED5E7;
pub const SLAB_SEED: u64 = 0x51AB;
pub const PARTITION_SEED: u64 = 0;

#[inline]
pub fn key_hash(key: EmbeddingKey, seed: u64) -> u64 {
    xxh64(&key.to_le_bytes(), seed)
}

/// Which slabset a key may live in.
#[inline]
pub fn slabset_index(key: EmbeddingKey, slabsets: usize) -> usize {
    (key_hash(key, SLABSET_SEED) % slabsets as u64) as usize
}

/// Which slab of its slabset probing starts from.
#[inline]
pub fn first_slab_index(key: EmbeddingKey, ways: usize) -> usize {
    (key_hash(key, SLAB_SEED) % ways as u64) as usize
}

/// Volatile-tier partition owning `key`.
#[inline]
pub fn partition_of(key: EmbeddingKey, partition_count: usize) -> usize {
    (key_hash(key, PARTITION_SEED) % partition_count as u64) as usize
}
