//! Declarative layer stacks executed on the autodiff tape.

mod arch;
mod count;
mod io;

use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out_extent, BatchStats, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use crate::autodiff::Activation;
pub use arch::{build_arch, ARCH_NAMES};
pub use count::{count_params_flops, Counts};
pub use io::{ArchDesc, LayerDesc};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `out x in x k x k`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Shortcut transform applied to the residual source when shapes change.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Activation(Activation),
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    Flatten,
    Linear(Linear),
    /// Adds the output of layer `source` (optionally projected) to the running value.
    ResidualAdd { source: usize, projection: Option<Box<Projection>> },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Activation(_) => "activation",
            Layer::MaxPool { .. } => "maxpool",
            Layer::AvgPool { .. } => "avgpool",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "linear",
            Layer::ResidualAdd { .. } => "residual-add",
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            Layer::Linear(l) => std::iter::once(&l.weight).chain(l.bias.as_ref()).collect(),
            Layer::ResidualAdd {
                projection: Some(p), ..
            } => std::iter::once(&p.conv.weight)
                .chain(p.conv.bias.as_ref())
                .chain([&p.bn.gamma, &p.bn.beta])
                .collect(),
            _ => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Linear(l) => std::iter::once(&mut l.weight).chain(l.bias.as_mut()).collect(),
            Layer::ResidualAdd {
                projection: Some(p), ..
            } => {
                let p = &mut **p;
                std::iter::once(&mut p.conv.weight)
                    .chain(p.conv.bias.as_mut())
                    .chain([&mut p.bn.gamma, &mut p.bn.beta])
                    .collect()
            }
            _ => vec![],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Register weights as trainable tape parameters (otherwise constants).
    pub trainable: bool,
}

impl ForwardOptions {
    pub const EVAL_FROZEN: Self = Self {
        mode: Mode::Eval,
        trainable: false,
    };
    pub const TRAIN: Self = Self {
        mode: Mode::Train,
        trainable: true,
    };
}

/// Called after every layer with `(tape, layer index, output)`; the returned
/// node replaces the layer output for everything downstream.
pub type LayerHook<'a> = dyn FnMut(&mut Tape, usize, NodeId) -> Result<NodeId> + 'a;

#[derive(Debug)]
pub struct ForwardPass {
    pub output: NodeId,
    /// Post-hook output of every executed layer, indexed by layer.
    pub layer_outputs: Vec<Option<NodeId>>,
    /// Tape nodes for the weights, in [`Network::params`] order.
    pub param_nodes: Vec<NodeId>,
    bn_updates: Vec<(usize, bool, BatchStats)>,
}

/// A prunable convolution and the layers its channels flow through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunableLayer {
    pub conv: usize,
    /// Batch norm directly after the conv, if any.
    pub bn: Option<usize>,
    /// Layer whose output is mixed with the control stream.
    pub mix_point: usize,
    /// First conv or linear layer that reads these channels.
    pub consumer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    /// Per-example input shape, `C x H x W`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
}

fn layer_err(layer: usize, kind: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Layer {
        layer,
        kind,
        reason: e.to_string(),
    }
}

impl Network {
    pub fn new(input_shape: Vec<usize>, num_classes: usize, layers: Vec<Layer>) -> Result<Self> {
        let net = Self {
            input_shape,
            num_classes,
            layers,
        };
        let shapes = net.infer_shapes()?;
        match shapes.last() {
            Some(s) if s == &[num_classes] => Ok(net),
            Some(s) => Err(Error::invalid(format!(
                "network ends in shape {s:?}, expected [{num_classes}] logits"
            ))),
            None if net.input_shape == [num_classes] => Ok(net),
            None => Err(Error::invalid("empty network must map its input to logits")),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Per-example output shape of every layer.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |reason: String| Error::Layer {
                layer: i,
                kind: layer.kind(),
                reason,
            };
            cur = match layer {
                Layer::Conv(c) => {
                    if cur.len() != 3 || cur[0] != c.in_channels() {
                        return Err(bad(format!("input {cur:?} incompatible with weight {:?}", c.weight.shape())));
                    }
                    let oh = conv_out_extent(cur[1], c.kernel(), c.stride, c.padding);
                    let ow = conv_out_extent(cur[2], c.kernel(), c.stride, c.padding);
                    match (oh, ow) {
                        (Some(h), Some(w)) => vec![c.out_channels(), h, w],
                        _ => return Err(bad(format!("kernel does not fit input {cur:?}"))),
                    }
                }
                Layer::BatchNorm(b) => {
                    if cur.is_empty() || cur[0] != b.channels() {
                        return Err(bad(format!("input {cur:?} has wrong channel count for {}", b.channels())));
                    }
                    cur
                }
                Layer::Activation(_) => cur,
                Layer::MaxPool { kernel, stride } | Layer::AvgPool { kernel, stride } => {
                    if cur.len() != 3 {
                        return Err(bad(format!("expected CHW input, got {cur:?}")));
                    }
                    match (
                        conv_out_extent(cur[1], *kernel, *stride, 0),
                        conv_out_extent(cur[2], *kernel, *stride, 0),
                    ) {
                        (Some(h), Some(w)) => vec![cur[0], h, w],
                        _ => return Err(bad(format!("pool window does not fit {cur:?}"))),
                    }
                }
                Layer::Flatten => vec![cur.iter().product()],
                Layer::Linear(l) => {
                    if cur.len() != 1 || cur[0] != l.weight.shape()[1] {
                        return Err(bad(format!("input {cur:?} incompatible with weight {:?}", l.weight.shape())));
                    }
                    vec![l.weight.shape()[0]]
                }
                Layer::ResidualAdd { source, projection } => {
                    if *source >= i {
                        return Err(bad(format!("source layer {source} does not precede the add")));
                    }
                    let mut src = shapes[*source].clone();
                    if let Some(p) = projection {
                        if src.len() != 3 || src[0] != p.conv.in_channels() {
                            return Err(bad(format!("projection cannot consume {src:?}")));
                        }
                        src = vec![
                            p.conv.out_channels(),
                            conv_out_extent(src[1], p.conv.kernel(), p.conv.stride, p.conv.padding).unwrap_or(0),
                            conv_out_extent(src[2], p.conv.kernel(), p.conv.stride, p.conv.padding).unwrap_or(0),
                        ];
                    }
                    if src != cur {
                        return Err(bad(format!("operand shapes differ: {src:?} vs {cur:?}")));
                    }
                    cur
                }
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// Records the full network on `tape`, starting from the network input.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        input: NodeId,
        opts: ForwardOptions,
        hook: Option<&mut LayerHook<'_>>,
    ) -> Result<ForwardPass> {
        self.forward_range(tape, 0, input, opts, hook)
    }

    /// Runs layers `start..` taking `input` as the output of layer `start - 1`
    /// (or the network input when `start == 0`).
    pub fn forward_range(
        &self,
        tape: &mut Tape,
        start: usize,
        input: NodeId,
        opts: ForwardOptions,
        mut hook: Option<&mut LayerHook<'_>>,
    ) -> Result<ForwardPass> {
        let expected: Vec<usize> = if start == 0 {
            self.input_shape.clone()
        } else {
            self.infer_shapes()?
                .get(start - 1)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("start layer {start} out of range")))?
        };
        let got = tape.value(input).shape();
        if got.len() != expected.len() + 1 || got[1..] != expected[..] {
            return Err(Error::Layer {
                layer: start,
                kind: self.layers.get(start).map_or("input", Layer::kind),
                reason: format!("input batch shape {got:?} does not match expected [N, {expected:?}]"),
            });
        }

        let mut param_nodes = Vec::new();
        let mut register = |tape: &mut Tape, t: &Tensor| {
            let id = if opts.trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            param_nodes.push(id);
            id
        };
        // parameters of skipped layers still get nodes so indices line up
        for layer in &self.layers[..start.min(self.layers.len())] {
            for p in layer.params() {
                register(tape, p);
            }
        }

        let mut outputs: Vec<Option<NodeId>> = vec![None; self.layers.len()];
        let mut bn_updates = Vec::new();
        let mut cur = input;
        for (i, layer) in self.layers.iter().enumerate().skip(start) {
            let wrap = layer_err(i, layer.kind());
            cur = match layer {
                Layer::Conv(c) => {
                    let w = register(tape, &c.weight);
                    let b = c.bias.as_ref().map(|b| register(tape, b));
                    tape.conv2d(cur, w, b, c.stride, c.padding).map_err(&wrap)?
                }
                Layer::BatchNorm(bn) => {
                    let g = register(tape, &bn.gamma);
                    let b = register(tape, &bn.beta);
                    batchnorm(tape, cur, g, b, bn, opts.mode, i, false, &mut bn_updates).map_err(&wrap)?
                }
                Layer::Activation(kind) => tape.activation(cur, *kind),
                Layer::MaxPool { kernel, stride } => tape.maxpool2d(cur, *kernel, *stride).map_err(&wrap)?,
                Layer::AvgPool { kernel, stride } => tape.avgpool2d(cur, *kernel, *stride).map_err(&wrap)?,
                Layer::Flatten => tape.flatten(cur).map_err(&wrap)?,
                Layer::Linear(l) => {
                    let w = register(tape, &l.weight);
                    let b = l.bias.as_ref().map(|b| register(tape, b));
                    tape.linear(cur, w, b).map_err(&wrap)?
                }
                Layer::ResidualAdd { source, projection } => {
                    let src = outputs.get(*source).copied().flatten().ok_or_else(|| Error::Layer {
                        layer: i,
                        kind: "residual-add",
                        reason: format!("source layer {source} was not executed in this pass"),
                    })?;
                    let shortcut = match projection {
                        Some(p) => {
                            let w = register(tape, &p.conv.weight);
                            let b = p.conv.bias.as_ref().map(|b| register(tape, b));
                            let g = register(tape, &p.bn.gamma);
                            let bt = register(tape, &p.bn.beta);
                            let c = tape.conv2d(src, w, b, p.conv.stride, p.conv.padding).map_err(&wrap)?;
                            batchnorm(tape, c, g, bt, &p.bn, opts.mode, i, true, &mut bn_updates).map_err(&wrap)?
                        }
                        None => src,
                    };
                    tape.add(cur, shortcut).map_err(&wrap)?
                }
            };
            if let Some(h) = hook.as_mut() {
                cur = h(tape, i, cur)?;
            }
            outputs[i] = Some(cur);
        }
        Ok(ForwardPass {
            output: cur,
            layer_outputs: outputs,
            param_nodes,
            bn_updates,
        })
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, pass: &ForwardPass) {
        for (layer, projection, stats) in &pass.bn_updates {
            match (&mut self.layers[*layer], projection) {
                (Layer::BatchNorm(bn), false) => bn.update_running(stats),
                (
                    Layer::ResidualAdd {
                        projection: Some(p), ..
                    },
                    true,
                ) => p.bn.update_running(stats),
                _ => unreachable!("batch-norm update recorded for a non-BN layer"),
            }
        }
    }

    /// Eval-mode logits for a batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let pass = self.forward_on_tape(&mut tape, x, ForwardOptions::EVAL_FROZEN, None)?;
        Ok(tape.value(pass.output).clone())
    }

    /// Convolutions whose filters can be removed without touching a residual
    /// connection, in layer order.
    pub fn prunable_layers(&self) -> Vec<PrunableLayer> {
        let residual_sources: Vec<usize> = self
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::ResidualAdd { source, .. } => Some(*source),
                _ => None,
            })
            .collect();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if !matches!(layer, Layer::Conv(_)) {
                continue;
            }
            let bn = match self.layers.get(i + 1) {
                Some(Layer::BatchNorm(_)) => Some(i + 1),
                _ => None,
            };
            let mut mix_point = bn.unwrap_or(i);
            let mut j = mix_point + 1;
            while let Some(Layer::Activation(_)) = self.layers.get(j) {
                mix_point = j;
                j += 1;
            }
            let consumer = loop {
                match self.layers.get(j) {
                    Some(Layer::MaxPool { .. } | Layer::AvgPool { .. } | Layer::Flatten | Layer::Activation(_)) => j += 1,
                    Some(Layer::Conv(_) | Layer::Linear(_)) => break Some(j),
                    _ => break None,
                }
            };
            let Some(consumer) = consumer else { continue };
            if residual_sources.iter().any(|&s| s >= i && s < consumer) {
                continue;
            }
            out.push(PrunableLayer {
                conv: i,
                bn,
                mix_point,
                consumer,
            });
        }
        out
    }

    /// Hash of every weight and running statistic, in layer order.
    pub fn weights_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[allow(clippy::too_many_arguments)]
fn batchnorm(
    tape: &mut Tape,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    bn: &BatchNorm2d,
    mode: Mode,
    layer: usize,
    projection: bool,
    updates: &mut Vec<(usize, bool, BatchStats)>,
) -> Result<NodeId> {
    match mode {
        Mode::Train => {
            let (y, stats) = tape.batchnorm_train(x, gamma, beta, bn.eps)?;
            updates.push((layer, projection, stats));
            Ok(y)
        }
        Mode::Eval => tape.batchnorm_eval(
            x,
            gamma,
            beta,
            bn.running_mean.data(),
            bn.running_var.data(),
            bn.eps,
        ),
    }
}
