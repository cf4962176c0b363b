//! One slabset of the embedding cache and the per-key probe algorithms.
//!
//! A slabset is `ways` slabs of [`SLAB_SLOTS`] slots. Each slot holds a key,
//! its vector and the recency stamp of its last hit or insert. Probing starts
//! at the key's first slab and walks the slabs in ring order:
//!
//! - key found in the slab: hit;
//! - otherwise, slab has an empty slot: the key is absent (query/update stop,
//!   replace writes into the lowest empty slot);
//! - all slabs full and none holds the key: absent; replace overwrites the
//!   slot with the smallest stamp, lowest `(slab, slot)` first on ties.
//!
//! Slots are never vacated once filled, so a key can only sit behind a full
//! slab, which keeps the early "empty slot means absent" exit sound.
//!
//! A `SlabSet` is plain data; callers provide exclusion.

use alloc::vec;
use alloc::vec::Vec;

use crate::types::EmbeddingKey;

pub const SLAB_SLOTS: usize = 32;
pub const DEFAULT_WAYS: usize = 2;

/// What `replace` did with a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplaceOutcome {
    /// Key was resident; only its stamp moved.
    Refreshed,
    /// Written into an empty slot.
    Inserted,
    /// Overwrote the least recently used slot, which held this key.
    Evicted(EmbeddingKey),
}

#[derive(Debug, Clone)]
pub struct SlabSet {
    ways: usize,
    dim: usize,
    keys: Vec<EmbeddingKey>,
    stamps: Vec<u64>,
    /// Bit `i` of `occupied[s]` is set when slot `i` of slab `s` is filled.
    occupied: Vec<u32>,
    values: Vec<f32>,
}

impl SlabSet {
    pub fn new(ways: usize, dim: usize) -> Self {
        assert!(ways >= 1, "a slabset needs at least one slab");
        let slots = ways * SLAB_SLOTS;
        Self {
            ways,
            dim,
            keys: vec![0; slots],
            stamps: vec![0; slots],
            occupied: vec![0; ways],
            values: vec![0.0; slots * dim],
        }
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    pub fn capacity(&self) -> usize {
        self.ways * SLAB_SLOTS
    }

    pub fn occupied(&self) -> usize {
        self.occupied.iter().map(|m| m.count_ones() as usize).sum()
    }

    /// Walks the probe sequence. Returns the slot holding `key`, or the slab
    /// where probing stopped on an empty slot, or `Probe::Full`.
    fn probe(&self, key: EmbeddingKey, first_slab: usize) -> Probe {
        for i in 0..self.ways {
            let slab = (first_slab + i) % self.ways;
            let mask = self.occupied[slab];
            let base = slab * SLAB_SLOTS;
            let mut bits = mask;
            while bits != 0 {
                let slot = bits.trailing_zeros() as usize;
                if self.keys[base + slot] == key {
                    return Probe::Hit(base + slot);
                }
                bits &= bits - 1;
            }
            if mask != u32::MAX {
                return Probe::Empty(base + (!mask).trailing_zeros() as usize);
            }
        }
        Probe::Full
    }

    fn value_mut(&mut self, slot: usize) -> &mut [f32] {
        &mut self.values[slot * self.dim..(slot + 1) * self.dim]
    }

    fn value(&self, slot: usize) -> &[f32] {
        &self.values[slot * self.dim..(slot + 1) * self.dim]
    }

    fn fill(&mut self, slot: usize, key: EmbeddingKey, value: &[f32], stamp: u64) {
        self.keys[slot] = key;
        self.stamps[slot] = stamp;
        self.occupied[slot / SLAB_SLOTS] |= 1 << (slot % SLAB_SLOTS);
        self.value_mut(slot).copy_from_slice(value);
    }

    /// On a hit copies the vector into `out`, stamps the slot and returns true.
    pub fn query(&mut self, key: EmbeddingKey, first_slab: usize, stamp: u64, out: &mut [f32]) -> bool {
        match self.probe(key, first_slab) {
            Probe::Hit(slot) => {
                self.stamps[slot] = stamp;
                out.copy_from_slice(self.value(slot));
                true
            }
            _ => false,
        }
    }

    /// Inserts `key` unless it is already resident.
    pub fn replace(&mut self, key: EmbeddingKey, first_slab: usize, stamp: u64, value: &[f32]) -> ReplaceOutcome {
        debug_assert_eq!(value.len(), self.dim);
        match self.probe(key, first_slab) {
            Probe::Hit(slot) => {
                self.stamps[slot] = stamp;
                ReplaceOutcome::Refreshed
            }
            Probe::Empty(slot) => {
                self.fill(slot, key, value, stamp);
                ReplaceOutcome::Inserted
            }
            Probe::Full => {
                let victim = self.lru_slot();
                let old = self.keys[victim];
                self.fill(victim, key, value, stamp);
                ReplaceOutcome::Evicted(old)
            }
        }
    }

    /// Overwrites the vector of a resident key in place. Stamps are untouched.
    pub fn update(&mut self, key: EmbeddingKey, first_slab: usize, value: &[f32]) -> bool {
        debug_assert_eq!(value.len(), self.dim);
        match self.probe(key, first_slab) {
            Probe::Hit(slot) => {
                self.value_mut(slot).copy_from_slice(value);
                true
            }
            _ => false,
        }
    }

    /// Minimal stamp over every slot; the first one in `(slab, slot)` order wins ties.
    fn lru_slot(&self) -> usize {
        let mut best = 0;
        for slot in 1..self.stamps.len() {
            if self.stamps[slot] < self.stamps[best] {
                best = slot;
            }
        }
        best
    }

    /// Resident keys in `(slab, slot)` order.
    pub fn keys(&self) -> impl Iterator<Item = EmbeddingKey> + '_ {
        (0..self.keys.len())
            .filter(move |&slot| self.occupied[slot / SLAB_SLOTS] & (1 << (slot % SLAB_SLOTS)) != 0)
            .map(move |slot| self.keys[slot])
    }

    /// Resident `(key, stamp)` pairs in `(slab, slot)` order.
    pub fn entries(&self) -> impl Iterator<Item = (EmbeddingKey, u64)> + '_ {
        (0..self.keys.len())
            .filter(move |&slot| self.occupied[slot / SLAB_SLOTS] & (1 << (slot % SLAB_SLOTS)) != 0)
            .map(move |slot| (self.keys[slot], self.stamps[slot]))
    }
}

#[derive(Debug, Clone, Copy)]
enum Probe {
    Hit(usize),
    Empty(usize),
    Full,
}
