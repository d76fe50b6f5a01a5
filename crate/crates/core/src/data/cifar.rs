//! CIFAR-10 binary batches: one label byte then 3072 channel-planar pixels.

use std::path::Path;

use super::bytes::read_file;
use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORD_BYTES: usize = 3073;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

pub fn parse_cifar_records(bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Corrupt {
            what: "CIFAR-10 batch",
            reason: format!("size {} is not a positive multiple of {RECORD_BYTES}", bytes.len()),
        });
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| f64::from(p) / 255.0));
    }
    Ok((pixels, labels))
}

fn load_files(dir: &Path, files: &[&str], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let (p, l) = parse_cifar_records(&read_file(&dir.join(f))?)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    Dataset::new(Tensor::from_parts(vec![n, 3, 32, 32], pixels)?, labels, 10, split)
}

/// Loads CIFAR-10 from `dir` or its `cifar-10-batches-bin` subdirectory.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let nested = dir.join("cifar-10-batches-bin");
    let dir = if nested.is_dir() { nested.as_path() } else { dir };
    Ok((
        load_files(dir, &TRAIN_FILES, Split::Train)?,
        load_files(dir, &[TEST_FILE], Split::Test)?,
    ))
}
