//! Feature histograms of real against knockoff activations, and metrics tables.

use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::data::write_file_atomic;
use crate::error::{Error, Result};
use crate::nn::{ForwardOptions, Network};
use crate::pipeline::MetricsRecord;
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureHistogram {
    pub layer: usize,
    /// `bins + 1` edges spanning the pooled minimum and maximum.
    pub edges: Vec<f64>,
    pub real: Vec<usize>,
    pub knockoff: Vec<usize>,
}

impl FeatureHistogram {
    pub fn new(layer: usize, real: &[f64], knockoff: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let (lo, hi) = real
            .iter()
            .chain(knockoff)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
        let count = |xs: &[f64]| {
            let mut c = vec![0; bins];
            for &v in xs {
                let b = if width > 0.0 { ((v - lo) / width) as usize } else { 0 };
                c[b.min(bins - 1)] += 1;
            }
            c
        };
        Self {
            layer,
            edges,
            real: count(real),
            knockoff: count(knockoff),
        }
    }

    /// Total-variation distance between the two normalized histograms.
    pub fn tv_distance(&self) -> f64 {
        let (nr, nk) = (self.real.iter().sum::<usize>(), self.knockoff.iter().sum::<usize>());
        if nr == 0 || nk == 0 {
            return if nr == nk { 0.0 } else { 1.0 };
        }
        0.5 * self
            .real
            .iter()
            .zip(&self.knockoff)
            .map(|(&r, &k)| (r as f64 / nr as f64 - k as f64 / nk as f64).abs())
            .sum::<f64>()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,real_count,knockoff_count\n");
        for i in 0..self.real.len() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                self.edges[i],
                self.edges[i + 1],
                self.real[i],
                self.knockoff[i]
            ));
        }
        s
    }
}

/// Histograms of the eval-mode outputs of `layers` for aligned batches.
pub fn feature_histograms(net: &Network, real: &Tensor, knockoff: &Tensor, layers: &[usize]) -> Result<Vec<FeatureHistogram>> {
    real.expect_same_shape(knockoff, "feature histograms")?;
    if let Some(&bad) = layers.iter().find(|&&l| l >= net.len()) {
        return Err(Error::invalid(format!("layer {bad} out of range for a {}-layer network", net.len())));
    }
    let mut tape = Tape::new();
    let xr = tape.constant(real.clone());
    let xk = tape.constant(knockoff.clone());
    let pr = net.forward_on_tape(&mut tape, xr, ForwardOptions::EVAL_FROZEN, None)?;
    let pk = net.forward_on_tape(&mut tape, xk, ForwardOptions::EVAL_FROZEN, None)?;
    Ok(layers
        .iter()
        .map(|&l| {
            let r = tape.value(pr.layer_outputs[l].expect("all layers run"));
            let k = tape.value(pk.layer_outputs[l].expect("all layers run"));
            FeatureHistogram::new(l, r.data(), k.data(), HISTOGRAM_BINS)
        })
        .collect())
}

/// Writes `layer_<i>.csv` per requested layer into `out_dir`.
pub fn emit_feature_histograms(
    net: &Network,
    real: &Tensor,
    knockoff: &Tensor,
    layers: &[usize],
    out_dir: &Path,
) -> Result<Vec<(PathBuf, FeatureHistogram)>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    feature_histograms(net, real, knockoff, layers)?
        .into_iter()
        .map(|h| {
            let path = out_dir.join(format!("layer_{}.csv", h.layer));
            write_file_atomic(&path, h.to_csv().as_bytes())?;
            Ok((path, h))
        })
        .collect()
}

/// Markdown table with one row per metrics record.
pub fn metrics_table(records: &[MetricsRecord]) -> String {
    let mut s = String::from(
        "| label | seed | rate | baseline acc | pruned acc | final acc | error gap | params drop | FLOPs drop |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for r in records {
        s.push_str(&format!(
            "| {} | {} | {} | {:.2}% | {:.2}% | {:.2}% | {:.2}% | {:.1}% | {:.1}% |\n",
            r.label,
            r.config.seed,
            r.config.prune.rate,
            100.0 * r.baseline_accuracy,
            100.0 * r.pruned_accuracy,
            100.0 * r.final_accuracy,
            100.0 * r.error_gap,
            r.reduction.params_drop_pct,
            r.reduction.flops_drop_pct,
        ));
    }
    s
}
