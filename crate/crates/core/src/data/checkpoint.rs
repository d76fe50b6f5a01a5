//! `SCOPCKPT` container: named, typed, CRC-protected sections.
//!
//! Layout (integers little-endian):
//! `"SCOPCKPT"`, version u32, section count u32, then per section
//! name length u32, UTF-8 name, dtype u8, rank u32, rank x u64 dims,
//! payload, CRC32 u32 over everything in the section before it.

use std::path::Path;

use super::bytes::{checked_numel, read_file, write_file_atomic, Reader};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SCOPCKPT";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Tensor),
    F32 { shape: Vec<usize>, data: Vec<f32> },
    /// Raw bytes, e.g. embedded JSON.
    U8(Vec<u8>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F64(_) => 0,
            Payload::F32 { .. } => 1,
            Payload::U8(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub payload: Payload,
}

impl Section {
    pub fn tensor(name: impl Into<String>, t: Tensor) -> Self {
        Self {
            name: name.into(),
            payload: Payload::F64(t),
        }
    }

    pub fn bytes(name: impl Into<String>, b: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            payload: Payload::U8(b),
        }
    }
}

pub fn encode_checkpoint(sections: &[Section]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for s in sections {
        let start = out.len();
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.push(s.payload.tag());
        let dims: Vec<usize> = match &s.payload {
            Payload::F64(t) => t.shape().to_vec(),
            Payload::F32 { shape, .. } => shape.clone(),
            Payload::U8(b) => vec![b.len()],
        };
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        match &s.payload {
            Payload::F64(t) => out.extend(t.to_le_bytes()),
            Payload::F32 { data, .. } => out.extend(data.iter().flat_map(|v| v.to_le_bytes())),
            Payload::U8(b) => out.extend_from_slice(b),
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    out
}

const WHAT: &str = "checkpoint";

fn corrupt(reason: impl Into<String>) -> Error {
    Error::Corrupt {
        what: WHAT,
        reason: reason.into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<Section>> {
    let mut r = Reader::new(bytes, WHAT);
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            what: WHAT,
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32_le()?;
    if version != VERSION {
        return Err(Error::BadVersion { what: WHAT, found: version });
    }
    let count = r.u32_le()? as usize;
    let mut sections = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let start = r.position();
        let name_len = r.u32_le()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| corrupt("section name is not UTF-8"))?
            .to_string();
        let tag = r.u8()?;
        let rank = r.u32_le()? as usize;
        if rank > MAX_RANK {
            return Err(corrupt(format!("section {name:?} has rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| r.u64_le().and_then(|d| usize::try_from(d).map_err(|_| corrupt("dimension overflow"))))
            .collect::<Result<Vec<_>>>()?;
        let numel = checked_numel(&dims, WHAT)?;
        let width = match tag {
            0 => 8,
            1 => 4,
            2 => 1,
            other => return Err(corrupt(format!("section {name:?} has unknown dtype tag {other}"))),
        };
        let len = numel.checked_mul(width).ok_or_else(|| corrupt("payload size overflow"))?;
        let raw = r.take(len)?;
        let end = r.position();
        let stored = r.u32_le()?;
        let computed = crc32fast::hash(&bytes[start..end]);
        if stored != computed {
            return Err(Error::Checksum {
                section: name,
                stored,
                computed,
            });
        }
        let payload = match tag {
            0 => {
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect();
                Payload::F64(Tensor::from_parts(dims, data).map_err(|e| corrupt(e.to_string()))?)
            }
            1 => Payload::F32 {
                shape: dims,
                data: raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect(),
            },
            _ => {
                if rank != 1 {
                    return Err(corrupt(format!("byte section {name:?} must have rank 1")));
                }
                Payload::U8(raw.to_vec())
            }
        };
        sections.push(Section { name, payload });
    }
    r.finish()?;
    Ok(sections)
}

pub fn save_checkpoint(path: &Path, sections: &[Section]) -> Result<()> {
    write_file_atomic(path, &encode_checkpoint(sections))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<Section>> {
    decode_checkpoint(&read_file(path)?)
}

pub fn save_network(path: &Path, net: &Network) -> Result<()> {
    save_checkpoint(path, &net.to_sections())
}

pub fn load_network(path: &Path) -> Result<Network> {
    Network::from_sections(&load_checkpoint(path)?)
}
