//! Datasets, normalization, file parsers and the checkpoint container.

mod bytes;
pub mod checkpoint;
pub mod cifar;
pub mod idx;
mod synthetic;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, load_network, save_checkpoint, save_network, Payload, Section};
pub use cifar::load_cifar10;
pub use idx::load_mnist;
pub use synthetic::{make_planted_dataset, make_synthetic_images, PlantedData};

pub(crate) use bytes::Reader;
pub use bytes::{read_file, write_file_atomic};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Channel statistics of an `N x C x H x W` tensor. Constant channels get
    /// std 1 so the transform stays invertible.
    pub fn fit(images: &Tensor) -> Self {
        let (n, c) = (images.shape()[0], images.shape()[1]);
        let spatial = images.row_len() / c;
        let count = (n * spatial) as f64;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (i, chunk) in images.data().chunks_exact(spatial).enumerate() {
            let ch = i % c;
            for &v in chunk {
                mean[ch] += v;
                sq[ch] += v * v;
            }
        }
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                let var = (s / count - *m * *m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, images: &mut Tensor) {
        let c = images.shape()[1];
        let spatial = images.row_len() / c;
        for (i, chunk) in images.data_mut().chunks_exact_mut(spatial).enumerate() {
            let (m, s) = (self.mean[i % c], self.std[i % c]);
            for v in chunk {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn map_value(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N x C x H x W`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// Raw value range before normalization, if the source is bounded.
    pub raw_range: Option<(f64, f64)>,
    /// Normalization applied to `images`, if any.
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::InvalidShape {
                shape: images.shape().to_vec(),
                reason: "dataset images must be N x C x H x W".into(),
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Corrupt {
                what: "dataset labels",
                reason: format!("label {l} at index {i} outside [0, {num_classes})"),
            });
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
            raw_range: Some((0.0, 1.0)),
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape, `C x H x W`.
    pub fn example_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn example_dim(&self) -> usize {
        self.images.row_len()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.select_rows(indices)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// The first `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(indices)?;
        Ok(Self {
            images,
            labels,
            ..self.clone_meta()
        })
    }

    /// A class-stratified-by-chance random subset of size `n`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Self> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.truncate(n);
        idx.sort_unstable();
        self.subset(&idx)
    }

    fn clone_meta(&self) -> Self {
        Self {
            images: Tensor::scalar(0.0),
            labels: Vec::new(),
            num_classes: self.num_classes,
            split: self.split,
            raw_range: self.raw_range,
            normalization: self.normalization.clone(),
        }
    }

    /// Normalizes in place with `norm` (usually fitted on the train split).
    pub fn normalize(&mut self, norm: &Normalization) {
        norm.apply(&mut self.images);
        self.normalization = Some(norm.clone());
    }

    /// Per-channel valid value range in the current (possibly normalized) space.
    pub fn value_bounds(&self) -> Option<Vec<(f64, f64)>> {
        let (lo, hi) = self.raw_range?;
        let c = self.channels();
        let norm = self.normalization.clone().unwrap_or_else(|| Normalization::identity(c));
        Some(
            (0..c)
                .map(|ch| (norm.map_value(ch, lo), norm.map_value(ch, hi)))
                .collect(),
        )
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Fits normalization on `train` and applies it to both splits.
pub fn normalize_pair(train: &mut Dataset, test: &mut Dataset) -> Normalization {
    let norm = Normalization::fit(&train.images);
    train.normalize(&norm);
    test.normalize(&norm);
    norm
}

#[cfg(test)]
mod tests;
