//! Big-endian IDX files (MNIST).

use std::path::Path;

use super::bytes::{checked_numel, read_file, Reader};
use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Parses an unsigned-byte IDX file, returning its dimensions and payload.
pub fn parse_idx(bytes: &[u8], expected_magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let mut r = Reader::new(bytes, "IDX file");
    let magic = r.u32_be()?;
    if magic != expected_magic {
        return Err(Error::BadMagic {
            what: "IDX file",
            expected: format!("{expected_magic:#010x}"),
            found: format!("{magic:#010x}"),
        });
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank).map(|_| r.u32_be().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let numel = checked_numel(&dims, "IDX file")?;
    let payload = r.take(numel)?;
    r.finish()?;
    Ok((dims, payload))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let (dims, payload) = parse_idx(bytes, IMAGES_MAGIC)?;
    if dims.contains(&0) {
        return Err(Error::Corrupt {
            what: "IDX images",
            reason: format!("empty dimension in {dims:?}"),
        });
    }
    let data = payload.iter().map(|&p| f64::from(p) / 255.0).collect();
    Tensor::from_parts(vec![dims[0], 1, dims[1], dims[2]], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, payload) = parse_idx(bytes, LABELS_MAGIC)?;
    Ok(payload.iter().map(|&l| l as usize).collect())
}

fn load_split(dir: &Path, images: &str, labels: &str, split: Split) -> Result<Dataset> {
    let x = parse_idx_images(&read_file(&dir.join(images))?)?;
    let y = parse_idx_labels(&read_file(&dir.join(labels))?)?;
    Dataset::new(x, y, 10, split)
}

/// Loads the four standard MNIST files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let [ti, tl, vi, vl] = MNIST_FILES;
    Ok((
        load_split(dir, ti, tl, Split::Train)?,
        load_split(dir, vi, vl, Split::Test)?,
    ))
}
