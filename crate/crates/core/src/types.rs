//! Domain vocabulary shared by every tier.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::error::CoreError;

/// Identifies one embedding inside a table. Every 64-bit value is legal.
pub type EmbeddingKey = u64;

/// A dense embedding vector whose components are all finite.
#[derive(Clone, PartialEq, Default)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Validates that every component is finite.
    pub fn new(components: Vec<f32>) -> Result<Self, CoreError> {
        check_finite(&components)?;
        Ok(Self(components))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(alloc::vec![0.0; dim])
    }

    pub fn from_slice(components: &[f32]) -> Result<Self, CoreError> {
        Self::new(components.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    /// Bitwise equality, so `-0.0 != 0.0`. Durability checks want this.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl AsRef<[f32]> for EmbeddingVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

pub fn check_finite(components: &[f32]) -> Result<(), CoreError> {
    match components.iter().position(|c| !c.is_finite()) {
        Some(index) => Err(CoreError::NonFinite { index }),
        None => Ok(()),
    }
}

pub const MAX_TABLE_NAME: usize = 255;

/// An embedding table: a unique name plus its immutable vector dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TableId {
    name: String,
    dim: usize,
}

impl TableId {
    pub fn new(name: impl Into<String>, dim: usize) -> Result<Self, CoreError> {
        let name = name.into();
        if name.is_empty() || name.len() > MAX_TABLE_NAME {
            return Err(CoreError::InvalidTableName(name.len()));
        }
        if dim == 0 {
            return Err(CoreError::ZeroDimension);
        }
        Ok(Self { name, dim })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Checks that `vector` has this table's dimension.
    pub fn check_dim(&self, len: usize) -> Result<(), CoreError> {
        if len == self.dim {
            Ok(())
        } else {
            Err(CoreError::DimensionMismatch { expected: self.dim, actual: len })
        }
    }
}

impl fmt::Display for TableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.name, self.dim)
    }
}

/// Keys to look up in one table. Duplicates are allowed and order matters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupQuery {
    pub table: TableId,
    pub keys: Vec<EmbeddingKey>,
}

impl LookupQuery {
    pub fn new(table: TableId, keys: Vec<EmbeddingKey>) -> Self {
        Self { table, keys }
    }
}

/// Vectors aligned 1:1 with the query positions, stored row-major.
///
/// `miss_flags[i]` is set when position `i` was answered with the default
/// vector instead of the stored embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupResult {
    dim: usize,
    values: Vec<f32>,
    pub miss_flags: Vec<bool>,
}

impl LookupResult {
    pub fn new(dim: usize, values: Vec<f32>, miss_flags: Vec<bool>) -> Self {
        assert_eq!(values.len(), dim * miss_flags.len(), "result buffer misaligned");
        Self { dim, values, miss_flags }
    }

    pub fn len(&self) -> usize {
        self.miss_flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.miss_flags.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, position: usize) -> &[f32] {
        &self.values[position * self.dim..(position + 1) * self.dim]
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f32]> + '_ {
        // chunks_exact(0) panics; a zero-dim result never exists past TableId validation
        self.values.chunks_exact(self.dim.max(1)).take(self.len())
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn defaults_returned(&self) -> usize {
        self.miss_flags.iter().filter(|m| **m).count()
    }
}
