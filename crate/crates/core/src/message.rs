//! Update-stream messages and their byte encoding.
//!
//! ```text
//! [u64 seq][u16 name_len][name bytes][u64 key][u32 dim][dim x f32]
//! ```
//!
//! Used unchanged for persisted topic logs.

use alloc::string::String;
use alloc::vec::Vec;

use crate::codec::{put_f32s, Reader};
use crate::error::DecodeError;
use crate::types::{EmbeddingKey, EmbeddingVector, TableId};

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMessage {
    pub seq: u64,
    pub table: TableId,
    pub key: EmbeddingKey,
    pub vector: EmbeddingVector,
}

impl UpdateMessage {
    pub fn encode(&self, out: &mut Vec<u8>) {
        let name = self.table.name().as_bytes();
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&self.key.to_le_bytes());
        out.extend_from_slice(&(self.vector.dim() as u32).to_le_bytes());
        put_f32s(out, self.vector.as_slice());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode(&mut out);
        out
    }

    /// Decodes one message from the front of `buf`, returning it with the
    /// number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Self, usize), DecodeError> {
        let mut r = Reader::new(buf);
        let seq = r.u64()?;
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| DecodeError::Malformed("table name is not UTF-8"))?;
        let key = r.u64()?;
        let dim = r.u32()? as usize;
        let values = r.f32s(dim)?;
        let table = TableId::new(name, dim)?;
        let vector = EmbeddingVector::new(values).map_err(DecodeError::from)?;
        Ok((UpdateMessage { seq, table, key, vector }, r.position()))
    }
}

/// Decodes back-to-back messages. Stops at a torn tail and reports where the
/// last complete message ended.
pub fn decode_log(buf: &[u8]) -> (Vec<UpdateMessage>, usize, Option<DecodeError>) {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < buf.len() {
        match UpdateMessage::decode(&buf[pos..]) {
            Ok((m, n)) => {
                out.push(m);
                pos += n;
            }
            Err(e) => return (out, pos, Some(e)),
        }
    }
    (out, pos, None)
}

impl From<(TableId, EmbeddingKey, EmbeddingVector)> for UpdateMessage {
    fn from((table, key, vector): (TableId, EmbeddingKey, EmbeddingVector)) -> Self {
        UpdateMessage { seq: 0, table, key, vector }
    }
}
