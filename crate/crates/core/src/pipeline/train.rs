//! Supervised training and evaluation loops.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, ForwardOptions, Layer, Mode, Network};
use crate::optim::{cosine_lr, Sgd};
use crate::rng::{indexed_stream, StageRng};
use crate::tensor::Tensor;

pub const MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Random crop (pad 2) and horizontal flip on training images.
    #[serde(default)]
    pub augment: bool,
}

fn default_weight_decay() -> f64 {
    5e-4
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 1,
            batch: 128,
            weight_decay: default_weight_decay(),
            augment: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
}

/// Pads by 2, crops back at a random offset and flips half the images.
fn augment(batch: &Tensor, rng: &mut StageRng) -> Tensor {
    use rand::Rng;
    let s = batch.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(s);
    let src = batch.data();
    let dst = out.data_mut();
    for i in 0..n {
        let dy = rng.random_range(0..5) as isize - 2;
        let dx = rng.random_range(0..5) as isize - 2;
        let flip = rng.random_bool(0.5);
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    dst[base + y * w + x] = src[base + sy as usize * w + sx as usize];
                }
            }
        }
    }
    out
}

/// SGD with momentum and a cosine schedule over all steps; BN runs in train
/// mode. `trainable[i]` (in [`Network::params`] order) freezes parameters.
pub fn train_network(
    net: &mut Network,
    data: &Dataset,
    config: &TrainConfig,
    seed: u64,
    stage: &str,
    trainable: Option<&[bool]>,
) -> Result<TrainReport> {
    if config.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut report = TrainReport::default();
    if config.epochs == 0 || data.is_empty() {
        return Ok(report);
    }
    let per_epoch = data.len().div_ceil(config.batch);
    let total = per_epoch * config.epochs;
    let mut sgd = Sgd::new(MOMENTUM, config.weight_decay);
    let mut aug_rng = crate::rng::stream(seed, &format!("{stage}-augment"));
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut indexed_stream(seed, &format!("{stage}-shuffle"), epoch as u64));
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch) {
            let (mut x, labels) = data.batch(chunk)?;
            if config.augment {
                x = augment(&x, &mut aug_rng);
            }
            let mut tape = Tape::new();
            let input = tape.constant(x);
            let pass = net.forward_on_tape(&mut tape, input, ForwardOptions::TRAIN, None)?;
            let loss = tape.cross_entropy(pass.output, &labels)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: report.steps,
                    loss: lv,
                });
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = pass
                .param_nodes
                .iter()
                .zip(net.params())
                .enumerate()
                .map(|(i, (&id, p))| {
                    if trainable.is_some_and(|t| !t[i]) {
                        Tensor::zeros(p.shape())
                    } else {
                        grads.wrt(id, p.shape())
                    }
                })
                .collect();
            net.apply_bn_updates(&pass);
            let lr = cosine_lr(config.lr, report.steps, total);
            let mut params = net.params_mut();
            match trainable {
                None => sgd.step(lr, &mut params, &g.iter().collect::<Vec<_>>()),
                Some(mask) => {
                    let mut sel: Vec<&mut Tensor> = Vec::new();
                    let mut sg: Vec<&Tensor> = Vec::new();
                    for (i, p) in params.into_iter().enumerate() {
                        if mask[i] {
                            sel.push(p);
                            sg.push(&g[i]);
                        }
                    }
                    sgd.step(lr, &mut sel, &sg);
                }
            }
            report.steps += 1;
            sum += lv;
        }
        report.epoch_losses.push(sum / per_epoch as f64);
    }
    Ok(report)
}

fn batch_norms(net: &mut Network) -> Vec<&mut BatchNorm2d> {
    net.layers
        .iter_mut()
        .filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            Layer::ResidualAdd {
                projection: Some(p), ..
            } => Some(&mut p.bn),
            _ => None,
        })
        .collect()
}

/// Replaces every batch-norm running average with the exact mean of batch
/// statistics over the first `examples` training examples. Weights are untouched.
pub fn recalibrate_batchnorm(net: &mut Network, data: &Dataset, examples: usize, batch: usize) -> Result<()> {
    let n = examples.min(data.len());
    if n == 0 {
        return Ok(());
    }
    let saved: Vec<f64> = batch_norms(net).iter().map(|bn| bn.momentum).collect();
    let idx: Vec<usize> = (0..n).collect();
    let opts = ForwardOptions {
        mode: Mode::Train,
        trainable: false,
    };
    for (k, chunk) in idx.chunks(batch.max(1)).enumerate() {
        for bn in batch_norms(net) {
            bn.momentum = 1.0 / (k as f64 + 1.0);
        }
        let (x, _) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let input = tape.constant(x);
        let pass = net.forward_on_tape(&mut tape, input, opts, None)?;
        net.apply_bn_updates(&pass);
    }
    for (bn, m) in batch_norms(net).into_iter().zip(saved) {
        bn.momentum = m;
    }
    Ok(())
}

/// Fraction of examples whose arg-max logit equals the label.
pub fn evaluate(net: &Network, data: &Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let batch = batch.max(1);
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch) {
        let (x, labels) = data.batch(chunk)?;
        let logits = net.predict(&x)?;
        let k = logits.row_len();
        for (row, &l) in logits.data().chunks_exact(k).zip(&labels) {
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            correct += usize::from(arg == l);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
