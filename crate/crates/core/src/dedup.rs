//! Key deduplication applied before every cache access.

use alloc::vec::Vec;
use hashbrown::hash_map::Entry;
use hashbrown::HashMap;

use crate::types::EmbeddingKey;

/// Distinct keys in first-occurrence order plus the map back to input positions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dedup {
    pub unique: Vec<EmbeddingKey>,
    /// `unique[inverse[i]] == keys[i]` for every input position `i`.
    pub inverse: Vec<usize>,
}

impl Dedup {
    /// Re-expands the unique keys into the original sequence.
    pub fn expand(&self) -> Vec<EmbeddingKey> {
        self.inverse.iter().map(|&i| self.unique[i]).collect()
    }
}

pub fn dedup(keys: &[EmbeddingKey]) -> Dedup {
    let mut seen: HashMap<EmbeddingKey, usize> = HashMap::with_capacity(keys.len());
    let mut unique = Vec::with_capacity(keys.len());
    let inverse = keys
        .iter()
        .map(|&k| match seen.entry(k) {
            Entry::Occupied(e) => *e.get(),
            Entry::Vacant(e) => {
                unique.push(k);
                *e.insert(unique.len() - 1)
            }
        })
        .collect();
    Dedup { unique, inverse }
}

/// Returns the first key that occurs twice, if any.
pub fn first_duplicate(keys: &[EmbeddingKey]) -> Option<EmbeddingKey> {
    let mut seen = hashbrown::HashSet::with_capacity(keys.len());
    keys.iter().copied().find(|k| !seen.insert(*k))
}
