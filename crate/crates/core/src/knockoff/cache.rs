//! Knockoff cache: `"SCOPKNCK"`, version u32, count u32, rank u32, rank x
//! u32 per-example dims, little-endian f32 values, then a CRC32 of all
//! preceding bytes.

use std::path::Path;

use crate::data::{read_file, write_file_atomic, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CACHE_MAGIC: &[u8; 8] = b"SCOPKNCK";
const VERSION: u32 = 1;
const WHAT: &str = "knockoff cache";

/// Encodes an `N x ...` tensor; values are narrowed to f32.
pub fn encode_knockoff_cache(images: &Tensor) -> Vec<u8> {
    let shape = images.shape();
    let mut out = Vec::with_capacity(24 + 4 * images.numel());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(shape[0] as u32).to_le_bytes());
    out.extend_from_slice(&((shape.len() - 1) as u32).to_le_bytes());
    for &d in &shape[1..] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in images.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_knockoff_cache(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes, WHAT);
    let magic = r.take(8)?;
    if magic != CACHE_MAGIC {
        return Err(Error::BadMagic {
            what: WHAT,
            expected: String::from_utf8_lossy(CACHE_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32_le()?;
    if version != VERSION {
        return Err(Error::BadVersion { what: WHAT, found: version });
    }
    let count = r.u32_le()? as usize;
    let rank = r.u32_le()? as usize;
    if rank > 7 {
        return Err(Error::Corrupt {
            what: WHAT,
            reason: format!("example rank {rank}"),
        });
    }
    let mut shape = vec![count];
    for _ in 0..rank {
        shape.push(r.u32_le()? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4).map(|_| n))
        .ok_or(Error::Corrupt {
            what: WHAT,
            reason: "shape overflow".into(),
        })?;
    let raw = r.take(numel * 4)?;
    let end = r.position();
    let stored = r.u32_le()?;
    r.finish()?;
    let computed = crc32fast::hash(&bytes[..end]);
    if stored != computed {
        return Err(Error::Checksum {
            section: WHAT.into(),
            stored,
            computed,
        });
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Corrupt {
        what: WHAT,
        reason: e.to_string(),
    })
}

pub fn write_knockoff_cache(path: &Path, images: &Tensor) -> Result<()> {
    write_file_atomic(path, &encode_knockoff_cache(images))
}

pub fn read_knockoff_cache(path: &Path) -> Result<Tensor> {
    decode_knockoff_cache(&read_file(path)?)
}
