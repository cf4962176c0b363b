//! A bounded volatile-tier partition with last-access timestamps.

use alloc::vec::Vec;
use hashbrown::HashMap;

use crate::types::EmbeddingKey;

/// How a partition sheds entries once it exceeds its overflow margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[non_exhaustive]
pub enum EvictionPolicy {
    /// Drop entries in ascending `(last_access, key)` order.
    #[default]
    EvictOldest,
}

#[derive(Debug, Clone)]
struct Slot {
    value: Vec<f32>,
    last_access: u64,
}

#[derive(Debug, Clone)]
pub struct Partition {
    overflow_margin: usize,
    policy: EvictionPolicy,
    entries: HashMap<EmbeddingKey, Slot>,
}

impl Partition {
    pub fn new(overflow_margin: usize, policy: EvictionPolicy) -> Self {
        Self { overflow_margin, policy, entries: HashMap::new() }
    }

    pub fn overflow_margin(&self) -> usize {
        self.overflow_margin
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: EmbeddingKey) -> Option<&[f32]> {
        self.entries.get(&key).map(|s| s.value.as_slice())
    }

    pub fn last_access(&self, key: EmbeddingKey) -> Option<u64> {
        self.entries.get(&key).map(|s| s.last_access)
    }

    /// Moves the key's timestamp forward to `at`; never backwards.
    pub fn touch(&mut self, key: EmbeddingKey, at: u64) {
        if let Some(slot) = self.entries.get_mut(&key) {
            slot.last_access = slot.last_access.max(at);
        }
    }

    /// Last-writer-wins insert. Does not prune; call [`Partition::evict`].
    pub fn insert(&mut self, key: EmbeddingKey, value: &[f32], at: u64) {
        match self.entries.get_mut(&key) {
            Some(slot) => {
                slot.value.clear();
                slot.value.extend_from_slice(value);
                slot.last_access = slot.last_access.max(at);
            }
            None => {
                self.entries.insert(key, Slot { value: value.to_vec(), last_access: at });
            }
        }
    }

    /// Inserts only when the key is not resident. Returns whether it wrote.
    pub fn insert_if_absent(&mut self, key: EmbeddingKey, value: &[f32], at: u64) -> bool {
        if self.entries.contains_key(&key) {
            return false;
        }
        self.entries.insert(key, Slot { value: value.to_vec(), last_access: at });
        true
    }

    /// Prunes down to the overflow margin and returns the evicted keys,
    /// oldest first.
    pub fn evict(&mut self) -> Vec<EmbeddingKey> {
        let excess = self.entries.len().saturating_sub(self.overflow_margin);
        if excess == 0 {
            return Vec::new();
        }
        match self.policy {
            EvictionPolicy::EvictOldest => {
                let mut order: Vec<(u64, EmbeddingKey)> =
                    self.entries.iter().map(|(k, s)| (s.last_access, *k)).collect();
                if excess < order.len() {
                    order.select_nth_unstable(excess - 1);
                    order.truncate(excess);
                }
                order.sort_unstable();
                order
                    .into_iter()
                    .map(|(_, k)| {
                        self.entries.remove(&k);
                        k
                    })
                    .collect()
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (EmbeddingKey, &[f32], u64)> + '_ {
        self.entries.iter().map(|(k, s)| (*k, s.value.as_slice(), s.last_access))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn at_margin_evicts_nothing() {
        let mut p = Partition::new(4, EvictionPolicy::EvictOldest);
        for k in 0..4 {
            p.insert(k, &[0.0], k);
        }
        assert!(p.evict().is_empty());
        assert_eq!(p.len(), 4);
    }

    #[test]
    fn single_clear_victim() {
        let mut p = Partition::new(2, EvictionPolicy::EvictOldest);
        p.insert(10, &[0.0], 5);
        p.insert(20, &[0.0], 9);
        p.insert(30, &[0.0], 9);
        assert_eq!(p.evict(), vec![10]);
    }

    #[test]
    fn ties_break_on_smaller_key() {
        let mut p = Partition::new(1, EvictionPolicy::EvictOldest);
        p.insert(30, &[0.0], 9);
        p.insert(20, &[0.0], 9);
        assert_eq!(p.evict(), vec![20]);
    }

    #[test]
    fn overwrite_keeps_one_entry() {
        let mut p = Partition::new(4, EvictionPolicy::EvictOldest);
        p.insert(1, &[1.0], 1);
        p.insert(1, &[2.0], 2);
        assert_eq!(p.len(), 1);
        assert_eq!(p.get(1), Some(&[2.0][..]));
        assert_eq!(p.last_access(1), Some(2));
        assert!(!p.insert_if_absent(1, &[3.0], 3));
        assert_eq!(p.get(1), Some(&[2.0][..]));
    }

    proptest! {
        #[test]
        fn evicts_bottom_of_sort_order(
            stamps in proptest::collection::vec(0u64..20, 1..60),
            margin in 1usize..30,
        ) {
            let mut p = Partition::new(margin, EvictionPolicy::EvictOldest);
            for (k, ts) in stamps.iter().enumerate() {
                p.insert(k as u64, &[0.0], *ts);
            }
            let mut oracle: std::vec::Vec<(u64, u64)> =
                stamps.iter().enumerate().map(|(k, ts)| (*ts, k as u64)).collect();
            oracle.sort();
            let expected: std::vec::Vec<u64> = oracle
                .iter()
                .take(stamps.len().saturating_sub(margin))
                .map(|(_, k)| *k)
                .collect();
            prop_assert_eq!(p.evict(), expected);
            prop_assert!(p.len() <= margin);
        }
    }
}
