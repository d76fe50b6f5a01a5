//! Per-filter scaling factors that mix real and control features, and the
//! loop that fits them against a frozen network.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, NodeId, Tape};
use crate::data::{Dataset, Payload, Section};
use crate::error::{Error, Result};
use crate::knockoff::{estimate_feature_s, BiasPairModel};
use crate::nn::{ForwardOptions, Layer, Network, PrunableLayer};
use crate::optim::Adam;
use crate::rng::{indexed_stream, stream, StageRng};
use crate::tensor::Tensor;

pub const SELSTATE_TAG: &str = "SELSTATE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlMode {
    Knockoff,
    Noise,
    RandomSample,
    None,
}

impl ControlMode {
    pub const ALL: [ControlMode; 4] = [Self::Knockoff, Self::Noise, Self::RandomSample, Self::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Knockoff => "knockoff",
            Self::Noise => "noise",
            Self::RandomSample => "random-sample",
            Self::None => "none",
        }
    }
}

impl fmt::Display for ControlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown control mode {s:?}; expected knockoff, noise, random-sample or none")))
    }
}

/// Scaling logits for one prunable conv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScaling {
    pub layer: PrunableLayer,
    pub theta: Vec<f64>,
}

impl LayerScaling {
    pub fn beta(&self) -> Vec<f64> {
        self.theta.iter().map(|&t| sigmoid(t)).collect()
    }

    pub fn beta_tilde(&self) -> Vec<f64> {
        self.beta().iter().map(|b| 1.0 - b).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionState {
    pub layers: Vec<LayerScaling>,
}

impl SelectionState {
    /// `θ = 0` everywhere, i.e. `β = β̃ = 0.5`.
    pub fn init(net: &Network) -> Result<Self> {
        let shapes = net.infer_shapes()?;
        Ok(Self {
            layers: net
                .prunable_layers()
                .into_iter()
                .map(|layer| LayerScaling {
                    layer,
                    theta: vec![0.0; shapes[layer.conv][0]],
                })
                .collect(),
        })
    }

    /// Largest `|β + β̃ − 1|` over every filter.
    pub fn constraint_violation(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.beta().into_iter().zip(l.beta_tilde()))
            .map(|(b, bt)| (b + bt - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_against(&self, net: &Network) -> Result<()> {
        let expected = net.prunable_layers();
        let shapes = net.infer_shapes()?;
        if expected.len() != self.layers.len() {
            return Err(Error::invalid(format!(
                "selection state has {} layers, network has {} prunable layers",
                self.layers.len(),
                expected.len()
            )));
        }
        for (l, p) in self.layers.iter().zip(&expected) {
            if l.layer != *p || l.theta.len() != shapes[p.conv][0] {
                return Err(Error::Layer {
                    layer: p.conv,
                    kind: "conv",
                    reason: "selection state does not match the network".into(),
                });
            }
        }
        Ok(())
    }

    pub fn to_sections(&self) -> Vec<Section> {
        let meta = serde_json::to_vec(&self.layers.iter().map(|l| l.layer).collect::<Vec<_>>())
            .expect("layer list serializes");
        std::iter::once(Section::bytes(SELSTATE_TAG, meta))
            .chain(self.layers.iter().map(|l| {
                Section::tensor(
                    format!("{SELSTATE_TAG}/theta.{}", l.layer.conv),
                    Tensor::vector(l.theta.clone()),
                )
            }))
            .collect()
    }

    pub fn from_sections(sections: &[Section]) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            what: "selection state",
            reason,
        };
        let meta = sections
            .iter()
            .find(|s| s.name == SELSTATE_TAG)
            .ok_or_else(|| corrupt(format!("missing {SELSTATE_TAG} section")))?;
        let Payload::U8(bytes) = &meta.payload else {
            return Err(corrupt("metadata section is not bytes".into()));
        };
        let layers: Vec<PrunableLayer> = serde_json::from_slice(bytes)?;
        let layers = layers
            .into_iter()
            .map(|layer| {
                let name = format!("{SELSTATE_TAG}/theta.{}", layer.conv);
                match sections.iter().find(|s| s.name == name).map(|s| &s.payload) {
                    Some(Payload::F64(t)) if t.rank() == 1 => Ok(LayerScaling {
                        layer,
                        theta: t.data().to_vec(),
                    }),
                    _ => Err(corrupt(format!("missing or malformed {name}"))),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

/// Lemma-2 bias pair generators for every conv in a network.
#[derive(Clone, Debug)]
pub struct BiasPairs {
    models: Vec<(usize, BiasPairModel)>,
}

fn patch_map(weight: &Tensor) -> DMatrix<f64> {
    let m = weight.shape()[0];
    let patch = weight.row_len();
    // rows: (c, ky, kx) patch entries; columns: output channels
    DMatrix::from_fn(patch, m, |p, o| weight.data()[o * patch + p])
}

impl BiasPairs {
    /// Fits per-conv models from a calibration pass of matched real and
    /// control batches through the frozen network.
    pub fn fit(net: &Network, real: &Tensor, control: &Tensor) -> Result<Self> {
        real.expect_same_shape(control, "bias calibration")?;
        let mut tape = Tape::new();
        let xr = tape.constant(real.clone());
        let xc = tape.constant(control.clone());
        let pr = net.forward_on_tape(&mut tape, xr, ForwardOptions::EVAL_FROZEN, None)?;
        let pc = net.forward_on_tape(&mut tape, xc, ForwardOptions::EVAL_FROZEN, None)?;
        let mut models = Vec::new();
        for (i, layer) in net.layers.iter().enumerate() {
            let Layer::Conv(conv) = layer else { continue };
            let (a, at) = if i == 0 {
                (xr, xc)
            } else {
                (pr.layer_outputs[i - 1].expect("executed"), pc.layer_outputs[i - 1].expect("executed"))
            };
            let s_channel = estimate_feature_s(tape.value(a), tape.value(at))?;
            let k2 = conv.kernel() * conv.kernel();
            let s_patch: Vec<f64> = s_channel.iter().flat_map(|&s| std::iter::repeat_n(s, k2)).collect();
            let model = BiasPairModel::with_default_bias(patch_map(&conv.weight), s_patch)?;
            models.push((i, model));
        }
        Ok(Self { models })
    }

    pub fn models(&self) -> &[(usize, BiasPairModel)] {
        &self.models
    }

    /// One `(b, b̃)` tensor pair per conv, shaped like that conv's output.
    fn sample(&self, batch: usize, shapes: &[Vec<usize>], rng: &mut StageRng) -> Vec<(usize, Tensor, Tensor)> {
        self.models
            .iter()
            .map(|(i, m)| {
                let shape = &shapes[*i];
                let (c, spatial) = (shape[0], shape[1] * shape[2]);
                let (rows_b, rows_bt) = m.sample_rows(rng, batch * spatial);
                let mut b = vec![0.0; batch * c * spatial];
                let mut bt = vec![0.0; batch * c * spatial];
                for n in 0..batch {
                    for p in 0..spatial {
                        let row = (n * spatial + p) * c;
                        for ch in 0..c {
                            b[(n * c + ch) * spatial + p] = rows_b[row + ch];
                            bt[(n * c + ch) * spatial + p] = rows_bt[row + ch];
                        }
                    }
                }
                let full = [&[batch][..], shape].concat();
                (
                    *i,
                    Tensor::from_parts(full.clone(), b).expect("sized above"),
                    Tensor::from_parts(full, bt).expect("sized above"),
                )
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct SelectionForward {
    pub logits: NodeId,
    /// Logit node for each state layer.
    pub theta_nodes: Vec<NodeId>,
    /// Mixed value fed onward at each state layer's mix point.
    pub mixed: Vec<NodeId>,
}

/// Records the two-stream selection forward on `tape`.
///
/// The control stream runs the frozen network on `control` unmixed. The
/// mixed stream replaces each prunable layer's output `A` with
/// `β ⊙ A + (1 − β) ⊙ Ã`, or `β ⊙ A` when `control` is `None`.
pub fn selection_forward(
    tape: &mut Tape,
    net: &Network,
    state: &SelectionState,
    real: &Tensor,
    control: Option<&Tensor>,
    biases: Option<&[(usize, Tensor, Tensor)]>,
    detach_control: bool,
) -> Result<SelectionForward> {
    state.check_against(net)?;
    if let Some(c) = control {
        if c.shape() != real.shape() {
            return Err(Error::Layer {
                layer: 0,
                kind: "input",
                reason: format!("control batch {:?} differs from real batch {:?}", c.shape(), real.shape()),
            });
        }
    }
    let add_bias = |tape: &mut Tape, i: usize, id: NodeId, pick: fn(&(usize, Tensor, Tensor)) -> &Tensor| -> Result<NodeId> {
        match biases.and_then(|b| b.iter().find(|e| e.0 == i)) {
            Some(e) => {
                let b = tape.constant(pick(e).clone());
                tape.add(id, b)
            }
            None => Ok(id),
        }
    };

    let control_outputs = match control {
        Some(c) => {
            let xc = tape.constant(c.clone());
            let mut hook = |t: &mut Tape, i: usize, id: NodeId| add_bias(t, i, id, |e| &e.2);
            let pass = net.forward_on_tape(tape, xc, ForwardOptions::EVAL_FROZEN, Some(&mut hook))?;
            Some(pass.layer_outputs)
        }
        None => None,
    };

    let theta_nodes: Vec<NodeId> = state
        .layers
        .iter()
        .map(|l| tape.param(Tensor::vector(l.theta.clone())))
        .collect();
    let mut mixed = Vec::with_capacity(state.layers.len());
    let xr = tape.constant(real.clone());
    let mut hook = |t: &mut Tape, i: usize, id: NodeId| -> Result<NodeId> {
        let id = add_bias(t, i, id, |e| &e.1)?;
        let Some(k) = state.layers.iter().position(|l| l.layer.mix_point == i) else {
            return Ok(id);
        };
        let beta = t.sigmoid(theta_nodes[k]);
        let real_part = t.channel_scale(id, beta)?;
        let out = match &control_outputs {
            Some(outs) => {
                let mut ctl = outs[i].expect("control stream executed every layer");
                if t.value(ctl).shape() != t.value(id).shape() {
                    return Err(Error::Layer {
                        layer: i,
                        kind: net.layers[i].kind(),
                        reason: format!(
                            "stream shapes diverge: {:?} vs {:?}",
                            t.value(id).shape(),
                            t.value(ctl).shape()
                        ),
                    });
                }
                if detach_control {
                    ctl = t.detach(ctl);
                }
                let beta_tilde = t.affine(beta, -1.0, 1.0);
                let ctl_part = t.channel_scale(ctl, beta_tilde)?;
                t.add(real_part, ctl_part)?
            }
            None => real_part,
        };
        mixed.push(out);
        Ok(out)
    };
    let pass = net.forward_on_tape(tape, xr, ForwardOptions::EVAL_FROZEN, Some(&mut hook))?;
    Ok(SelectionForward {
        logits: pass.output,
        theta_nodes,
        mixed,
    })
}

/// Per-channel mean and std of a dataset's images.
pub fn channel_stats(images: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = crate::data::Normalization::fit(images);
    (n.mean, n.std)
}

/// Source material for control batches.
pub struct ControlSource<'a> {
    pub mode: ControlMode,
    pub dataset: &'a Dataset,
    /// Index-aligned knockoffs; required in knockoff mode.
    pub knockoffs: Option<&'a Tensor>,
    pub stats: (Vec<f64>, Vec<f64>),
}

impl<'a> ControlSource<'a> {
    pub fn new(mode: ControlMode, dataset: &'a Dataset, knockoffs: Option<&'a Tensor>) -> Result<Self> {
        if mode == ControlMode::Knockoff {
            match knockoffs {
                None => return Err(Error::invalid("knockoff control mode requires a knockoff cache")),
                Some(k) if k.shape() != dataset.images.shape() => {
                    return Err(Error::ShapeMismatch {
                        op: "knockoff control",
                        lhs: k.shape().to_vec(),
                        rhs: dataset.images.shape().to_vec(),
                    })
                }
                _ => {}
            }
        }
        Ok(Self {
            mode,
            dataset,
            knockoffs,
            stats: channel_stats(&dataset.images),
        })
    }
}

/// Control batch for the real examples at `indices`. `None` mode yields zeros.
pub fn make_control_batch<R: Rng + ?Sized>(source: &ControlSource<'_>, indices: &[usize], rng: &mut R) -> Result<Tensor> {
    let ds = source.dataset;
    let mut shape = ds.images.shape().to_vec();
    shape[0] = indices.len();
    match source.mode {
        ControlMode::Knockoff => source
            .knockoffs
            .ok_or_else(|| Error::invalid("knockoff control mode requires a knockoff cache"))?
            .select_rows(indices),
        ControlMode::Noise => {
            let (mean, std) = &source.stats;
            let c = ds.channels();
            let spatial = ds.example_dim() / c;
            let data = (0..indices.len() * c * spatial)
                .map(|i| {
                    let ch = (i / spatial) % c;
                    mean[ch] + std[ch] * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            Tensor::from_parts(shape, data)
        }
        ControlMode::RandomSample => {
            let picks: Vec<usize> = (0..indices.len()).map(|_| rng.random_range(0..ds.len())).collect();
            ds.images.select_rows(&picks)
        }
        ControlMode::None => Ok(Tensor::zeros(&shape)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub bias: bool,
    #[serde(default)]
    pub detach_control: bool,
    /// Examples used to fit bias pairs.
    #[serde(default = "default_calibration")]
    pub calibration: usize,
}

fn default_calibration() -> usize {
    256
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 128,
            epochs: 10,
            seed: 0,
            bias: false,
            detach_control: false,
            calibration: default_calibration(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    /// Largest `|β + β̃ − 1|` seen after any step.
    pub max_constraint_violation: f64,
    pub weights_digest: String,
}

/// Fits the scaling logits with Adam on mixed-stream cross-entropy. The
/// network is never written to; its digest is compared before and after.
pub fn optimize_scaling(
    net: &Network,
    state: SelectionState,
    source: &ControlSource<'_>,
    config: &SelectionConfig,
) -> Result<(SelectionState, SelectionReport)> {
    optimize_scaling_with(net, state, source, config, |_, _| {})
}

/// As [`optimize_scaling`], calling `on_step(step, state)` after every update.
pub fn optimize_scaling_with(
    net: &Network,
    mut state: SelectionState,
    source: &ControlSource<'_>,
    config: &SelectionConfig,
    mut on_step: impl FnMut(usize, &SelectionState),
) -> Result<(SelectionState, SelectionReport)> {
    if config.batch == 0 {
        return Err(Error::invalid("selection batch size must be positive"));
    }
    state.check_against(net)?;
    let before = net.weights_digest();
    let ds = source.dataset;
    let use_control = source.mode != ControlMode::None;

    let biases = if config.bias && use_control {
        let n = config.calibration.clamp(2, ds.len().max(2)).min(ds.len());
        let idx: Vec<usize> = (0..n).collect();
        let real = ds.images.select_rows(&idx)?;
        let ctl = make_control_batch(source, &idx, &mut stream(config.seed, "bias-calibration"))?;
        Some(BiasPairs::fit(net, &real, &ctl)?)
    } else {
        None
    };
    let shapes = net.infer_shapes()?;

    let mut adam = Adam::new(config.lr);
    let mut report = SelectionReport::default();
    let mut control_rng = stream(config.seed, "select-control");
    let mut bias_rng = stream(config.seed, "select-bias");
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut indexed_stream(config.seed, "select-shuffle", epoch as u64));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch) {
            let (real, labels) = ds.batch(chunk)?;
            let control = if use_control {
                Some(make_control_batch(source, chunk, &mut control_rng)?)
            } else {
                None
            };
            let sampled = biases.as_ref().map(|b| b.sample(chunk.len(), &shapes, &mut bias_rng));
            let mut tape = Tape::new();
            let fwd = selection_forward(
                &mut tape,
                net,
                &state,
                &real,
                control.as_ref(),
                sampled.as_deref(),
                config.detach_control,
            )?;
            let loss = tape.cross_entropy(fwd.logits, &labels)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: report.steps,
                    loss: lv,
                });
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = fwd
                .theta_nodes
                .iter()
                .zip(&state.layers)
                .map(|(&id, l)| grads.wrt(id, &[l.theta.len()]))
                .collect();
            let mut thetas: Vec<Tensor> = state.layers.iter().map(|l| Tensor::vector(l.theta.clone())).collect();
            {
                let mut refs: Vec<&mut Tensor> = thetas.iter_mut().collect();
                let grefs: Vec<&Tensor> = g.iter().collect();
                adam.step(&mut refs, &grefs);
            }
            for (l, t) in state.layers.iter_mut().zip(thetas) {
                l.theta = t.into_data();
            }
            report.steps += 1;
            report.max_constraint_violation = report.max_constraint_violation.max(state.constraint_violation());
            on_step(report.steps, &state);
            total += lv;
            batches += 1;
        }
        report.epoch_losses.push(total / batches.max(1) as f64);
    }
    let after = net.weights_digest();
    if before != after {
        return Err(Error::WeightsMutated { before, after });
    }
    report.weights_digest = after;
    Ok((state, report))
}

#[cfg(test)]
mod tests;
