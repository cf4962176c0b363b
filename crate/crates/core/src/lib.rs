//! Allocation-only building blocks for a tiered embedding parameter store.
//!
//! Everything in this crate is `no_std` (with `alloc`): the data model and
//! the per-set algorithms of the slabset cache, the volatile-tier partition
//! with evict-oldest pruning, key deduplication, the power-law key sampler,
//! and the binary encodings shared by the disk log, the update stream and the
//! network service. Locking, threads and IO live in the `hps` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

mod codec;
pub mod dedup;
pub mod error;
pub mod hashing;
pub mod message;
pub mod partition;
pub mod powerlaw;
pub mod record;
pub mod slab;
pub mod types;
pub mod wire;

pub use dedup::{dedup, Dedup};
pub use error::{CoreError, DecodeError};
pub use types::{EmbeddingKey, EmbeddingVector, LookupQuery, LookupResult, TableId};
