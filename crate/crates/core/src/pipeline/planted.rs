//! Planted-teacher check of filter ranking.

use serde::{Deserialize, Serialize};

use super::train::{evaluate, train_network, TrainConfig};
use crate::data::{make_planted_dataset, PlantedData};
use crate::error::Result;
use crate::knockoff::{fit_knockoff_model, generate_knockoff_dataset, DEFAULT_RIDGE};
use crate::nn::{Activation, Conv2d, Layer, Linear, Network};
use crate::pruning::compute_importance;
use crate::selection::{optimize_scaling, ControlMode, ControlSource, SelectionConfig, SelectionState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub signal_dim: usize,
    pub noise_dim: usize,
    pub examples: usize,
    pub head: TrainConfig,
    pub selection_epochs: usize,
    pub selection_lr: f64,
    pub selection_batch: usize,
    pub head_bias: bool,
    pub bias_pairs: bool,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            signal_dim: 4,
            noise_dim: 4,
            examples: 4096,
            head: TrainConfig {
                lr: 0.1,
                epochs: 20,
                batch: 128,
                weight_decay: 0.0,
                augment: false,
            },
            selection_epochs: 10,
            selection_lr: 1e-3,
            selection_batch: 128,
            head_bias: false,
            bias_pairs: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedOutcome {
    pub seed: u64,
    pub mode: ControlMode,
    pub precision: f64,
    /// Teacher filters that read a signal coordinate.
    pub signal_filters: Vec<usize>,
    /// Highest-importance filters, as many as there are signal filters.
    pub top: Vec<usize>,
    pub importance: Vec<f64>,
    pub head_accuracy: f64,
}

/// One-conv teacher: filters `2c` and `2c + 1` are `+e_c` and `-e_c`, so
/// after the ReLU every input coordinate is split into its two signed parts.
/// Filters reading noise coordinates are orthogonal to the signal subspace.
pub fn build_teacher(planted: &PlantedData, head_bias: bool) -> Result<Network> {
    let d = planted.signal_mask.len();
    let m = 2 * d;
    let mut w = vec![0.0; m * d];
    for c in 0..d {
        w[(2 * c) * d + c] = 1.0;
        w[(2 * c + 1) * d + c] = -1.0;
    }
    let classes = planted.dataset.num_classes;
    Network::new(
        vec![d, 1, 1],
        classes,
        vec![
            Layer::Conv(Conv2d {
                weight: Tensor::new(vec![m, d, 1, 1], w)?,
                bias: None,
                stride: 1,
                padding: 0,
            }),
            Layer::Activation(Activation::Relu),
            Layer::Flatten,
            Layer::Linear(Linear {
                weight: Tensor::zeros(&[classes, m]),
                bias: head_bias.then(|| Tensor::zeros(&[classes])),
            }),
        ],
    )
}

/// Fraction of `top` that lies in `truth`.
pub fn precision(top: &[usize], truth: &[usize]) -> f64 {
    if top.is_empty() {
        return 0.0;
    }
    top.iter().filter(|t| truth.contains(t)).count() as f64 / top.len() as f64
}

/// Indices of the `k` largest scores; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Trains the teacher head with the conv frozen, runs selection under `mode`
/// and scores the top-ranked filters against the planted signal filters.
pub fn planted_diagnostic(seed: u64, mode: ControlMode, config: &PlantedConfig) -> Result<PlantedOutcome> {
    let planted = make_planted_dataset(seed, config.examples, config.signal_dim, config.noise_dim)?;
    let mut teacher = build_teacher(&planted, config.head_bias)?;
    let trainable: Vec<bool> = (0..teacher.params().len()).map(|i| i > 0).collect();
    train_network(&mut teacher, &planted.dataset, &config.head, seed, "planted-head", Some(&trainable))?;
    let head_accuracy = evaluate(&teacher, &planted.dataset, 512)?;

    let knock = if mode == ControlMode::Knockoff {
        let flat = planted.dataset.images.reshape(&[planted.dataset.len(), planted.signal_mask.len()])?;
        let model = fit_knockoff_model(&flat, DEFAULT_RIDGE)?;
        Some(generate_knockoff_dataset(&model, &planted.dataset, seed, None)?.images)
    } else {
        None
    };
    let source = ControlSource::new(mode, &planted.dataset, knock.as_ref())?;
    let sel = SelectionConfig {
        lr: config.selection_lr,
        batch: config.selection_batch,
        epochs: config.selection_epochs,
        seed,
        bias: config.bias_pairs,
        ..Default::default()
    };
    let (state, _) = optimize_scaling(&teacher, SelectionState::init(&teacher)?, &source, &sel)?;
    let importance = compute_importance(&state, &teacher, true)?.layers.remove(0).importance;

    let signal_filters: Vec<usize> = planted.signal_channels().iter().flat_map(|&c| [2 * c, 2 * c + 1]).collect();
    let top = top_k(&importance, signal_filters.len());
    Ok(PlantedOutcome {
        seed,
        mode,
        precision: precision(&top, &signal_filters),
        signal_filters,
        top,
        importance,
        head_accuracy,
    })
}
