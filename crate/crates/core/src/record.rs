//! On-disk segment records and the per-table MANIFEST.
//!
//! A segment file is a plain concatenation of records:
//!
//! ```text
//! [u64 key][u32 dim][dim x f32]      all little-endian
//! ```
//!
//! There is no framing beyond that; a record cut short at the end of a file
//! is a torn write and is reported as [`DecodeError::Truncated`].

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::codec::{put_f32s, Reader};
use crate::error::{CoreError, DecodeError};
use crate::types::{EmbeddingKey, TableId};

pub const RECORD_HEADER_LEN: usize = 12;
pub const MANIFEST_VERSION: u32 = 1;

pub fn record_len(dim: usize) -> usize {
    RECORD_HEADER_LEN + dim * 4
}

pub fn encode_record(key: EmbeddingKey, values: &[f32], out: &mut Vec<u8>) {
    out.extend_from_slice(&key.to_le_bytes());
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    put_f32s(out, values);
}

/// A decoded record and the number of bytes it occupied.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedRecord {
    pub key: EmbeddingKey,
    pub values: Vec<f32>,
    pub len: usize,
}

/// Decodes the record at the start of `buf`, requiring `expected_dim`.
pub fn decode_record(buf: &[u8], expected_dim: usize) -> Result<DecodedRecord, DecodeError> {
    let mut r = Reader::new(buf);
    let key = r.u64()?;
    let dim = r.u32()? as usize;
    if dim != expected_dim {
        return Err(CoreError::DimensionMismatch { expected: expected_dim, actual: dim }.into());
    }
    let values = r.f32s(dim)?;
    Ok(DecodedRecord { key, values, len: r.position() })
}

/// The `MANIFEST` text file: `name=`, `dim=`, `version=` lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub table: TableId,
    pub version: u32,
}

impl Manifest {
    pub fn new(table: TableId) -> Self {
        Self { table, version: MANIFEST_VERSION }
    }

    pub fn to_text(&self) -> String {
        format!("name={}\ndim={}\nversion={}\n", self.table.name(), self.table.dim(), self.version)
    }

    pub fn parse(text: &str) -> Result<Self, DecodeError> {
        let mut name: Option<String> = None;
        let mut dim: Option<usize> = None;
        let mut version: Option<u32> = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or(DecodeError::Malformed("manifest line without '='"))?;
            match k {
                "name" => name = Some(v.to_string()),
                "dim" => dim = Some(v.parse().map_err(|_| DecodeError::Malformed("manifest dim"))?),
                "version" => version = Some(v.parse().map_err(|_| DecodeError::Malformed("manifest version"))?),
                _ => return Err(DecodeError::Malformed("unknown manifest field")),
            }
        }
        let name = name.ok_or(DecodeError::Malformed("manifest missing name"))?;
        let dim = dim.ok_or(DecodeError::Malformed("manifest missing dim"))?;
        let version = version.ok_or(DecodeError::Malformed("manifest missing version"))?;
        if version != MANIFEST_VERSION {
            return Err(DecodeError::Malformed("unsupported manifest version"));
        }
        Ok(Self { table: TableId::new(name, dim)?, version })
    }
}
