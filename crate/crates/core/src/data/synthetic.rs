//! Generated datasets with known structure.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Planted inputs plus which input channels carry the label.
#[derive(Clone, Debug)]
pub struct PlantedData {
    pub dataset: Dataset,
    /// `signal_mask[c]` is true when input channel `c` is a signal dimension.
    pub signal_mask: Vec<bool>,
    /// Per-signal-dimension standard deviations, in signal-channel order.
    pub signal_scales: Vec<f64>,
}

impl PlantedData {
    pub fn signal_channels(&self) -> Vec<usize> {
        (0..self.signal_mask.len()).filter(|&c| self.signal_mask[c]).collect()
    }

    pub fn noise_channels(&self) -> Vec<usize> {
        (0..self.signal_mask.len()).filter(|&c| !self.signal_mask[c]).collect()
    }
}

/// Label for a vector of signal coordinates: `2k + (x_k < 0)` where `k`
/// maximizes `|x_k|`. Linearly separable with class scores `x_k` and `-x_k`.
pub fn planted_label(signal: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in signal.iter().enumerate() {
        if v.abs() > signal[best].abs() {
            best = k;
        }
    }
    2 * best + usize::from(signal[best] < 0.0)
}

/// Inputs are `(signal_dim + noise_dim) x 1 x 1` Gaussian vectors. Labels
/// depend only on the signal coordinates, which sit at seed-dependent channel
/// positions. Signal scales differ per dimension so the classes are unbalanced.
pub fn make_planted_dataset(seed: u64, n: usize, signal_dim: usize, noise_dim: usize) -> Result<PlantedData> {
    if n == 0 || signal_dim == 0 || noise_dim == 0 {
        return Err(Error::invalid("planted dataset needs n, signal_dim and noise_dim > 0"));
    }
    let d = signal_dim + noise_dim;
    let mut rng = stream(seed, "planted-layout");
    let mut channels: Vec<usize> = (0..d).collect();
    channels.shuffle(&mut rng);
    let signal_pos: Vec<usize> = {
        let mut s = channels[..signal_dim].to_vec();
        s.sort_unstable();
        s
    };
    let mut signal_mask = vec![false; d];
    for &c in &signal_pos {
        signal_mask[c] = true;
    }
    let signal_scales: Vec<f64> = (0..signal_dim).map(|k| 1.0 + 0.5 * k as f64).collect();

    let mut rng = stream(seed, "planted-samples");
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut sig = vec![0.0; signal_dim];
    for _ in 0..n {
        let mut k = 0;
        for &is_signal in &signal_mask {
            let z: f64 = rng.sample(StandardNormal);
            if is_signal {
                sig[k] = z * signal_scales[k];
                data.push(sig[k]);
                k += 1;
            } else {
                data.push(z);
            }
        }
        labels.push(planted_label(&sig));
    }
    let images = Tensor::from_parts(vec![n, d, 1, 1], data)?;
    let mut dataset = Dataset::new(images, labels, 2 * signal_dim, Split::Train)?;
    dataset.raw_range = None;
    Ok(PlantedData {
        dataset,
        signal_mask,
        signal_scales,
    })
}

/// Small image classification task: each class is a fixed random template,
/// examples are the template plus pixel noise, clamped to `[0, 1]`.
pub fn make_synthetic_images(
    seed: u64,
    n: usize,
    shape: [usize; 3],
    num_classes: usize,
    noise: f64,
    split: Split,
) -> Result<Dataset> {
    if n == 0 || num_classes == 0 || shape.contains(&0) {
        return Err(Error::invalid("synthetic dataset needs positive sizes"));
    }
    let dim: usize = shape.iter().product();
    let mut trng = stream(seed, "synthetic-templates");
    let templates: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| trng.random::<f64>()).collect())
        .collect();
    let tag = match split {
        Split::Train => "synthetic-train",
        Split::Test => "synthetic-test",
    };
    let mut rng = stream(seed, tag);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..num_classes);
        for &t in &templates[label] {
            let z: f64 = rng.sample(StandardNormal);
            data.push((t + noise * z).clamp(0.0, 1.0));
        }
        labels.push(label);
    }
    let images = Tensor::from_parts(vec![n, shape[0], shape[1], shape[2]], data)?;
    Dataset::new(images, labels, num_classes, split)
}
