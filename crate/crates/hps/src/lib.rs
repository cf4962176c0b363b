//! Hierarchical parameter server: a GPU-style slab cache in front of a
//! volatile in-memory tier and a persistent on-disk tier, kept current by
//! an update stream and a periodic cache refresh.

pub mod bench;
pub mod cache;
pub mod engine;
pub mod error;
pub mod node;
pub mod persistent;
pub mod refresh;
pub mod service;
pub mod stream;
pub mod tier;
pub mod volatile;
pub mod workload;

pub use error::{Error, Result};
