//! Framed binary protocol spoken by the lookup service.
//!
//! Every frame is `[u32 body_len][body]`. Request bodies:
//!
//! ```text
//! "HPS1" [u8 opcode][u16 name_len][name][u32 count][payload]
//!   LOOKUP  (1): count x u64 key
//!   UPDATE  (2): count x ([u64 key][u32 dim][dim x f32])
//!   REFRESH (3): count = 0, no payload
//!   STATS   (4): count = 0, no payload
//! ```
//!
//! Response bodies start with a status byte (0 OK, 1 TIER_FAULT,
//! 2 BAD_REQUEST). Errors carry `[u16 len][utf-8 message]`. OK bodies depend
//! on the request opcode:
//!
//! ```text
//! LOOKUP : [u32 dim][u32 count][count*dim x f32][ceil(count/8) miss bitmap, LSB first]
//! UPDATE : [u64 last_seq]
//! REFRESH: [u64 refreshed][u64 unresolved]
//! STATS  : [u32 hit_rate_ppm][u64 occupied] then 8 x u64 counters
//! ```
//!
//! All integers are little-endian.

use alloc::string::String;
use alloc::vec::Vec;

use crate::codec::{put_f32s, Reader};
use crate::error::{CoreError, DecodeError};
use crate::types::{check_finite, EmbeddingKey, MAX_TABLE_NAME};

pub const MAGIC: [u8; 4] = *b"HPS1";
/// Largest accepted frame body.
pub const MAX_FRAME_LEN: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Lookup = 1,
    Update = 2,
    Refresh = 3,
    Stats = 4,
}

impl TryFrom<u8> for Opcode {
    type Error = DecodeError;
    fn try_from(v: u8) -> Result<Self, DecodeError> {
        Ok(match v {
            1 => Opcode::Lookup,
            2 => Opcode::Update,
            3 => Opcode::Refresh,
            4 => Opcode::Stats,
            other => return Err(DecodeError::UnknownOpcode(other)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    TierFault = 1,
    BadRequest = 2,
}

impl TryFrom<u8> for Status {
    type Error = DecodeError;
    fn try_from(v: u8) -> Result<Self, DecodeError> {
        Ok(match v {
            0 => Status::Ok,
            1 => Status::TierFault,
            2 => Status::BadRequest,
            other => return Err(DecodeError::UnknownStatus(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Lookup { table: String, keys: Vec<EmbeddingKey> },
    Update { table: String, records: Vec<(EmbeddingKey, Vec<f32>)> },
    Refresh { table: String },
    Stats { table: String },
}

impl Request {
    pub fn opcode(&self) -> Opcode {
        match self {
            Request::Lookup { .. } => Opcode::Lookup,
            Request::Update { .. } => Opcode::Update,
            Request::Refresh { .. } => Opcode::Refresh,
            Request::Stats { .. } => Opcode::Stats,
        }
    }

    pub fn table(&self) -> &str {
        match self {
            Request::Lookup { table, .. }
            | Request::Update { table, .. }
            | Request::Refresh { table }
            | Request::Stats { table } => table,
        }
    }

    pub fn encode_body(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.push(self.opcode() as u8);
        let name = self.table().as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        match self {
            Request::Lookup { keys, .. } => {
                out.extend_from_slice(&(keys.len() as u32).to_le_bytes());
                for k in keys {
                    out.extend_from_slice(&k.to_le_bytes());
                }
            }
            Request::Update { records, .. } => {
                out.extend_from_slice(&(records.len() as u32).to_le_bytes());
                for (k, v) in records {
                    out.extend_from_slice(&k.to_le_bytes());
                    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
                    put_f32s(out, v);
                }
            }
            Request::Refresh { .. } | Request::Stats { .. } => out.extend_from_slice(&0u32.to_le_bytes()),
        }
    }

    /// The full length-prefixed frame.
    pub fn to_frame(&self) -> Vec<u8> {
        frame(|out| self.encode_body(out))
    }

    pub fn decode_body(body: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(body);
        if r.take(4)? != MAGIC {
            return Err(DecodeError::BadMagic);
        }
        let opcode = Opcode::try_from(r.u8()?)?;
        let name_len = r.u16()? as usize;
        if name_len == 0 || name_len > MAX_TABLE_NAME {
            return Err(CoreError::InvalidTableName(name_len).into());
        }
        let table = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| DecodeError::Malformed("table name is not UTF-8"))?;
        let count = r.u32()? as usize;
        let req = match opcode {
            Opcode::Lookup => {
                let mut keys = Vec::with_capacity(count.min(r.remaining() / 8));
                for _ in 0..count {
                    keys.push(r.u64()?);
                }
                Request::Lookup { table, keys }
            }
            Opcode::Update => {
                let mut records = Vec::with_capacity(count.min(r.remaining() / 12));
                for _ in 0..count {
                    let key = r.u64()?;
                    let dim = r.u32()? as usize;
                    if dim == 0 {
                        return Err(CoreError::ZeroDimension.into());
                    }
                    let values = r.f32s(dim)?;
                    check_finite(&values)?;
                    records.push((key, values));
                }
                Request::Update { table, records }
            }
            Opcode::Refresh | Opcode::Stats => {
                if count != 0 {
                    return Err(DecodeError::Malformed("count must be zero"));
                }
                if opcode == Opcode::Refresh {
                    Request::Refresh { table }
                } else {
                    Request::Stats { table }
                }
            }
        };
        r.finish()?;
        Ok(req)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StatsBody {
    pub hit_rate_ppm: u32,
    pub occupied_slots: u64,
    pub lookups: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub vdb_hits: u64,
    pub pdb_hits: u64,
    pub defaults_returned: u64,
    pub sync_batches: u64,
    pub async_batches: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Lookup { dim: u32, values: Vec<f32>, miss: Vec<bool> },
    Update { last_seq: u64 },
    Refresh { refreshed: u64, unresolved: u64 },
    Stats(StatsBody),
    Error { status: Status, message: String },
}

impl Response {
    pub fn status(&self) -> Status {
        match self {
            Response::Error { status, .. } => *status,
            _ => Status::Ok,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Response::Error { status: Status::BadRequest, message: message.into() }
    }

    pub fn tier_fault(message: impl Into<String>) -> Self {
        Response::Error { status: Status::TierFault, message: message.into() }
    }

    pub fn encode_body(&self, out: &mut Vec<u8>) {
        out.push(self.status() as u8);
        match self {
            Response::Lookup { dim, values, miss } => {
                out.extend_from_slice(&dim.to_le_bytes());
                out.extend_from_slice(&(miss.len() as u32).to_le_bytes());
                put_f32s(out, values);
                let mut bitmap = alloc::vec![0u8; miss.len().div_ceil(8)];
                for (i, m) in miss.iter().enumerate() {
                    if *m {
                        bitmap[i / 8] |= 1 << (i % 8);
                    }
                }
                out.extend_from_slice(&bitmap);
            }
            Response::Update { last_seq } => out.extend_from_slice(&last_seq.to_le_bytes()),
            Response::Refresh { refreshed, unresolved } => {
                out.extend_from_slice(&refreshed.to_le_bytes());
                out.extend_from_slice(&unresolved.to_le_bytes());
            }
            Response::Stats(s) => {
                out.extend_from_slice(&s.hit_rate_ppm.to_le_bytes());
                for v in [
                    s.occupied_slots,
                    s.lookups,
                    s.cache_hits,
                    s.cache_misses,
                    s.vdb_hits,
                    s.pdb_hits,
                    s.defaults_returned,
                    s.sync_batches,
                    s.async_batches,
                ] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Response::Error { message, .. } => {
                let msg = &message.as_bytes()[..message.len().min(u16::MAX as usize)];
                out.extend_from_slice(&(msg.len() as u16).to_le_bytes());
                out.extend_from_slice(msg);
            }
        }
    }

    pub fn to_frame(&self) -> Vec<u8> {
        frame(|out| self.encode_body(out))
    }

    /// Decodes a response body; `opcode` is the request it answers.
    pub fn decode_body(body: &[u8], opcode: Opcode) -> Result<Self, DecodeError> {
        let mut r = Reader::new(body);
        let status = Status::try_from(r.u8()?)?;
        let resp = if status != Status::Ok {
            let len = r.u16()? as usize;
            let message = String::from_utf8_lossy(r.take(len)?).into_owned();
            Response::Error { status, message }
        } else {
            match opcode {
                Opcode::Lookup => {
                    let dim = r.u32()?;
                    let count = r.u32()? as usize;
                    let n = count.checked_mul(dim as usize).ok_or(DecodeError::Malformed("size overflow"))?;
                    let values = r.f32s(n)?;
                    let bitmap = r.take(count.div_ceil(8))?;
                    let miss = (0..count).map(|i| bitmap[i / 8] & (1 << (i % 8)) != 0).collect();
                    Response::Lookup { dim, values, miss }
                }
                Opcode::Update => Response::Update { last_seq: r.u64()? },
                Opcode::Refresh => Response::Refresh { refreshed: r.u64()?, unresolved: r.u64()? },
                Opcode::Stats => Response::Stats(StatsBody {
                    hit_rate_ppm: r.u32()?,
                    occupied_slots: r.u64()?,
                    lookups: r.u64()?,
                    cache_hits: r.u64()?,
                    cache_misses: r.u64()?,
                    vdb_hits: r.u64()?,
                    pdb_hits: r.u64()?,
                    defaults_returned: r.u64()?,
                    sync_batches: r.u64()?,
                    async_batches: r.u64()?,
                }),
            }
        };
        r.finish()?;
        Ok(resp)
    }
}

fn frame(body: impl FnOnce(&mut Vec<u8>)) -> Vec<u8> {
    let mut out = alloc::vec![0u8; 4];
    body(&mut out);
    let len = (out.len() - 4) as u32;
    out[..4].copy_from_slice(&len.to_le_bytes());
    out
}

/// Splits one complete frame off the front of `buf`: `Ok(Some((body, consumed)))`,
/// `Ok(None)` if more bytes are needed.
pub fn split_frame(buf: &[u8]) -> Result<Option<(&[u8], usize)>, DecodeError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME_LEN {
        return Err(DecodeError::FrameTooLarge(len));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    Ok(Some((&buf[4..4 + len], 4 + len)))
}
