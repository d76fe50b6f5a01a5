//! Importance statistics, keep-plans and structural filter removal.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{count_params_flops, Counts, Layer, Network, PrunableLayer};
use crate::selection::SelectionState;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    pub layer: PrunableLayer,
    pub importance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub layers: Vec<LayerImportance>,
    /// Whether `|γ|` of the following batch norm was folded in.
    pub bn_scaled: bool,
}

/// `I = β − β̃`, times `|γ|` of the following batch norm when `bn_scale` is
/// set and the conv has one.
pub fn compute_importance(state: &SelectionState, net: &Network, bn_scale: bool) -> Result<ImportanceReport> {
    state.check_against(net)?;
    let layers = state
        .layers
        .iter()
        .map(|l| {
            let diff: Vec<f64> = l.beta().iter().zip(l.beta_tilde()).map(|(b, bt)| b - bt).collect();
            let importance = match (bn_scale, l.layer.bn) {
                (true, Some(bn)) => {
                    let Layer::BatchNorm(bn) = &net.layers[bn] else {
                        unreachable!("prunable layer bn index points at a batch norm")
                    };
                    diff.iter().zip(bn.gamma.data()).map(|(d, g)| g.abs() * d).collect()
                }
                _ => diff,
            };
            LayerImportance {
                layer: l.layer,
                importance,
            }
        })
        .collect();
    Ok(ImportanceReport {
        layers,
        bn_scaled: bn_scale,
    })
}

/// Filter L1 norms, the smaller-norm-less-important baseline.
pub fn l1_importance(net: &Network) -> ImportanceReport {
    let layers = net
        .prunable_layers()
        .into_iter()
        .map(|layer| {
            let Layer::Conv(c) = &net.layers[layer.conv] else { unreachable!("prunable layers are convs") };
            let len = c.weight.row_len();
            LayerImportance {
                layer,
                importance: c.weight.data().chunks_exact(len).map(|f| f.iter().map(|v| v.abs()).sum()).collect(),
            }
        })
        .collect();
    ImportanceReport { layers, bn_scaled: false }
}

/// Uniform random scores, the random-pruning baseline.
pub fn random_importance<R: Rng + ?Sized>(net: &Network, rng: &mut R) -> Result<ImportanceReport> {
    let shapes = net.infer_shapes()?;
    let layers = net
        .prunable_layers()
        .into_iter()
        .map(|layer| LayerImportance {
            layer,
            importance: (0..shapes[layer.conv][0]).map(|_| rng.random::<f64>()).collect(),
        })
        .collect();
    Ok(ImportanceReport { layers, bn_scaled: false })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer_index: usize,
    /// Ascending filter indices to keep.
    pub keep: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub rate: f64,
    pub layers: Vec<LayerPlan>,
}

/// `ceil((1 − r) M)`, ignoring float noise below 1e-9 so that e.g.
/// `r = 0.3, M = 10` keeps 7.
pub fn keep_budget(rate: f64, filters: usize) -> usize {
    ((1.0 - rate) * filters as f64 - 1e-9).ceil().max(0.0) as usize
}

pub fn make_plan(report: &ImportanceReport, rate: f64) -> Result<PruningPlan> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("pruning rate must be in [0, 1), got {rate}")));
    }
    let layers = report
        .layers
        .iter()
        .map(|l| {
            let m = l.importance.len();
            let kappa = keep_budget(rate, m);
            if kappa == 0 {
                return Err(Error::Layer {
                    layer: l.layer.conv,
                    kind: "conv",
                    reason: format!("rate {rate} would remove all {m} filters"),
                });
            }
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| l.importance[b].total_cmp(&l.importance[a]).then(a.cmp(&b)));
            let mut keep = order[..kappa].to_vec();
            keep.sort_unstable();
            Ok(LayerPlan {
                layer_index: l.layer.conv,
                keep,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PruningPlan { rate, layers })
}

fn check_plan<'a>(net: &Network, plan: &'a PruningPlan) -> Result<Vec<(PrunableLayer, &'a [usize])>> {
    let prunable = net.prunable_layers();
    let shapes = net.infer_shapes()?;
    plan.layers
        .iter()
        .map(|lp| {
            let p = prunable
                .iter()
                .find(|p| p.conv == lp.layer_index)
                .ok_or_else(|| Error::Layer {
                    layer: lp.layer_index,
                    kind: net.layers.get(lp.layer_index).map_or("missing", Layer::kind),
                    reason: "plan references a layer that is not prunable".into(),
                })?;
            let m = shapes[p.conv][0];
            let sorted_unique = lp.keep.windows(2).all(|w| w[0] < w[1]);
            if lp.keep.is_empty() || !sorted_unique || lp.keep.iter().any(|&k| k >= m) {
                return Err(Error::Layer {
                    layer: p.conv,
                    kind: "conv",
                    reason: format!("keep list must be non-empty, ascending, unique and below {m}"),
                });
            }
            Ok((*p, lp.keep.as_slice()))
        })
        .collect()
}

/// Column indices of a linear consumer that belong to the kept channels.
fn channel_columns(keep: &[usize], per_channel: usize) -> Vec<usize> {
    keep.iter().flat_map(|&c| c * per_channel..(c + 1) * per_channel).collect()
}

fn consumer_per_channel(net: &Network, p: &PrunableLayer, channels: usize) -> Result<usize> {
    let input = &net.infer_shapes()?[p.consumer - 1];
    Ok(input.iter().product::<usize>() / channels)
}

/// Removes pruned filters together with their batch-norm entries and the
/// consumer's matching input channels.
pub fn apply_plan(net: &Network, plan: &PruningPlan) -> Result<Network> {
    let entries = check_plan(net, plan)?;
    let shapes = net.infer_shapes()?;
    let mut out = net.clone();
    for (p, keep) in entries {
        let m = shapes[p.conv][0];
        let per_channel = consumer_per_channel(net, &p, m)?;
        if let Layer::Conv(c) = &mut out.layers[p.conv] {
            c.weight = c.weight.select_axis(0, keep)?;
            if let Some(b) = &mut c.bias {
                *b = b.select_axis(0, keep)?;
            }
        }
        if let Some(bi) = p.bn {
            if let Layer::BatchNorm(bn) = &mut out.layers[bi] {
                bn.gamma = bn.gamma.select_axis(0, keep)?;
                bn.beta = bn.beta.select_axis(0, keep)?;
                bn.running_mean = bn.running_mean.select_axis(0, keep)?;
                bn.running_var = bn.running_var.select_axis(0, keep)?;
            }
        }
        match &mut out.layers[p.consumer] {
            Layer::Conv(c) => c.weight = c.weight.select_axis(1, keep)?,
            Layer::Linear(l) => l.weight = l.weight.select_axis(1, &channel_columns(keep, per_channel))?,
            other => unreachable!("consumer is a {}", other.kind()),
        }
    }
    Network::new(out.input_shape.clone(), out.num_classes, out.layers)
}

/// The unpruned network with the consumer's input weights zeroed at every
/// pruned channel. Its outputs match [`apply_plan`]'s network.
pub fn masked_original(net: &Network, plan: &PruningPlan) -> Result<Network> {
    let entries = check_plan(net, plan)?;
    let shapes = net.infer_shapes()?;
    let mut out = net.clone();
    for (p, keep) in entries {
        let m = shapes[p.conv][0];
        let per_channel = consumer_per_channel(net, &p, m)?;
        let dropped: Vec<usize> = (0..m).filter(|c| keep.binary_search(c).is_err()).collect();
        let zero_in = |w: &mut Tensor, block: usize| {
            let (rows, cols) = (w.shape()[0], w.row_len());
            let data = w.data_mut();
            for r in 0..rows {
                for &c in &dropped {
                    data[r * cols + c * block..r * cols + (c + 1) * block].fill(0.0);
                }
            }
        };
        match &mut out.layers[p.consumer] {
            Layer::Conv(c) => {
                let k = c.kernel();
                zero_in(&mut c.weight, k * k);
            }
            Layer::Linear(l) => zero_in(&mut l.weight, per_channel),
            other => unreachable!("consumer is a {}", other.kind()),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionSummary {
    pub original: Counts,
    pub pruned: Counts,
    pub params_drop_pct: f64,
    pub flops_drop_pct: f64,
}

pub fn reduction_summary(orig: &Network, pruned: &Network) -> Result<ReductionSummary> {
    let (a, b) = (count_params_flops(orig)?, count_params_flops(pruned)?);
    let pct = |x: u64, y: u64| if x == 0 { 0.0 } else { 100.0 * (1.0 - y as f64 / x as f64) };
    Ok(ReductionSummary {
        original: a,
        pruned: b,
        params_drop_pct: pct(a.params, b.params),
        flops_drop_pct: pct(a.macs, b.macs),
    })
}
