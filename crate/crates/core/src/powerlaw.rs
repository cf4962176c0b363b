//! Power-law key streams and the frequent/stochastic/rare key taxonomy.
//!
//! Rank `r` in `1..=K` is drawn with probability proportional to `r^-alpha`
//! by inverting a precomputed cumulative table. Ranks are then mapped to keys
//! through a seeded permutation of `0..K`, so hot keys are scattered over the
//! key space instead of being numerically contiguous.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use hashbrown::HashSet;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::types::EmbeddingKey;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawSpec {
    pub alpha: f64,
    pub keyspace: u64,
    pub permute_seed: u64,
}

impl PowerLawSpec {
    pub fn new(alpha: f64, keyspace: u64, permute_seed: u64) -> Self {
        assert!(alpha > 0.0 && alpha.is_finite(), "alpha must be positive");
        assert!(keyspace >= 1, "keyspace must hold at least one key");
        Self { alpha, keyspace, permute_seed }
    }
}

/// Precomputed inverse-CDF sampler. O(K) memory, O(log K) per draw.
#[derive(Debug, Clone)]
pub struct PowerLawSampler {
    spec: PowerLawSpec,
    cdf: Vec<f64>,
    rank_to_key: Vec<EmbeddingKey>,
    key_to_rank: Vec<u32>,
}

impl PowerLawSampler {
    pub fn new(spec: PowerLawSpec) -> Self {
        let k = spec.keyspace as usize;
        assert!(k <= u32::MAX as usize, "keyspace too large for the rank table");
        let mut cdf = Vec::with_capacity(k);
        let mut acc = 0.0f64;
        for r in 1..=k {
            acc += libm::pow(r as f64, -spec.alpha);
            cdf.push(acc);
        }
        let total = acc;
        for c in &mut cdf {
            *c /= total;
        }

        let mut rank_to_key: Vec<EmbeddingKey> = (0..spec.keyspace).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.permute_seed);
        for i in (1..k).rev() {
            let j = rng.random_range(0..=i);
            rank_to_key.swap(i, j);
        }
        let mut key_to_rank = alloc::vec![0u32; k];
        for (rank, key) in rank_to_key.iter().enumerate() {
            key_to_rank[*key as usize] = rank as u32;
        }
        Self { spec, cdf, rank_to_key, key_to_rank }
    }

    pub fn spec(&self) -> &PowerLawSpec {
        &self.spec
    }

    /// Probability of the zero-based rank.
    pub fn rank_probability(&self, rank: usize) -> f64 {
        if rank == 0 {
            self.cdf[0]
        } else {
            self.cdf[rank] - self.cdf[rank - 1]
        }
    }

    /// Zero-based rank (0 = hottest) of a key in `0..K`.
    pub fn rank_of(&self, key: EmbeddingKey) -> usize {
        self.key_to_rank[key as usize] as usize
    }

    pub fn key_of(&self, rank: usize) -> EmbeddingKey {
        self.rank_to_key[rank]
    }

    /// Draws one zero-based rank.
    pub fn draw_rank<R: RngCore + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cdf.partition_point(|c| *c <= u).min(self.cdf.len() - 1)
    }

    pub fn draw<R: RngCore + ?Sized>(&self, rng: &mut R) -> EmbeddingKey {
        self.rank_to_key[self.draw_rank(rng)]
    }

    /// `n` keys, fully determined by `(spec, n, seed)`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<EmbeddingKey> {
        self.stream(seed).take(n).collect()
    }

    /// An endless deterministic key stream.
    pub fn stream(&self, seed: u64) -> KeyStream<'_> {
        KeyStream { sampler: self, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Share of `sample` that falls on the hottest `fraction` of the key space.
    pub fn head_coverage(&self, sample: &[EmbeddingKey], fraction: f64) -> f64 {
        if sample.is_empty() {
            return 0.0;
        }
        let head = (self.spec.keyspace as f64 * fraction) as usize;
        let hits = sample.iter().filter(|k| self.rank_of(**k) < head).count();
        hits as f64 / sample.len() as f64
    }
}

pub fn sample_keys(spec: PowerLawSpec, n: usize, seed: u64) -> Vec<EmbeddingKey> {
    PowerLawSampler::new(spec).sample(n, seed)
}

pub struct KeyStream<'a> {
    sampler: &'a PowerLawSampler,
    rng: ChaCha8Rng,
}

impl Iterator for KeyStream<'_> {
    type Item = EmbeddingKey;

    fn next(&mut self) -> Option<EmbeddingKey> {
        Some(self.sampler.draw(&mut self.rng))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum KeyCategory {
    Frequent,
    Stochastic,
    Rare,
}

/// Batch-occurrence bounds separating the categories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryThresholds {
    /// Keys present in at least this share of batches are frequent.
    pub frequent: f64,
    /// Keys present in at most this share of batches are rare.
    pub rare: f64,
}

impl Default for CategoryThresholds {
    fn default() -> Self {
        Self { frequent: 0.9, rare: 0.01 }
    }
}

/// Classifies each sampled key by the share of batches it appears in.
pub fn categorize_keys(
    sample: &[EmbeddingKey],
    batch_size: usize,
    thresholds: CategoryThresholds,
) -> BTreeMap<EmbeddingKey, KeyCategory> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut batches_seen: BTreeMap<EmbeddingKey, usize> = BTreeMap::new();
    let mut batches = 0usize;
    let mut in_batch = HashSet::new();
    for batch in sample.chunks(batch_size) {
        batches += 1;
        in_batch.clear();
        for &k in batch {
            if in_batch.insert(k) {
                *batches_seen.entry(k).or_default() += 1;
            }
        }
    }
    batches_seen
        .into_iter()
        .map(|(k, n)| {
            let share = n as f64 / batches as f64;
            let cat = if share >= thresholds.frequent {
                KeyCategory::Frequent
            } else if share <= thresholds.rare {
                KeyCategory::Rare
            } else {
                KeyCategory::Stochastic
            };
            (k, cat)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_space() {
        let s = PowerLawSampler::new(PowerLawSpec::new(1.2, 1, 3));
        assert!(s.sample(100, 9).iter().all(|k| *k == 0));
    }

    #[test]
    fn deterministic_per_seed() {
        let s = PowerLawSampler::new(PowerLawSpec::new(1.2, 10_000, 3));
        assert_eq!(s.sample(1000, 1), s.sample(1000, 1));
        assert_ne!(s.sample(1000, 1), s.sample(1000, 2));
    }

    #[test]
    fn probabilities_normalized() {
        let s = PowerLawSampler::new(PowerLawSpec::new(1.2, 100_000, 0));
        let total: f64 = (0..100_000).map(|r| s.rank_probability(r)).sum();
        assert!((total - 1.0).abs() < 1e-9, "{total}");
        assert!(s.rank_probability(0) > s.rank_probability(1));
    }

    #[test]
    fn permutation_is_bijective() {
        let s = PowerLawSampler::new(PowerLawSpec::new(1.0, 1000, 42));
        let mut seen = std::vec![false; 1000];
        for r in 0..1000 {
            let k = s.key_of(r);
            assert_eq!(s.rank_of(k), r);
            seen[k as usize] = true;
        }
        assert!(seen.iter().all(|x| *x));
    }

    #[test]
    fn single_batch_is_all_frequent() {
        let cats = categorize_keys(&[1, 2, 3, 2], 10, CategoryThresholds::default());
        assert!(cats.values().all(|c| *c == KeyCategory::Frequent));
    }

    #[test]
    fn every_batch_key_is_frequent() {
        let mut sample = std::vec::Vec::new();
        for b in 0..100u64 {
            sample.extend_from_slice(&[7, 1000 + b]);
        }
        let cats = categorize_keys(&sample, 2, CategoryThresholds::default());
        assert_eq!(cats[&7], KeyCategory::Frequent);
        assert_eq!(cats[&1000], KeyCategory::Rare);
    }
}
