//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward rule. Nodes are created in topological order, so
//! [`Tape::backward`] is a single reverse sweep. The tape is never consumed by
//! a backward pass; calling it twice yields identical gradients.

mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) use kernels::{conv_out_extent, gemm};
use kernels::{ConvGeometry, PoolGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { input: NodeId, scale: f64 },
    ChannelScale { input: NodeId, scale: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Linear { input: NodeId, weight: NodeId, bias: Option<NodeId> },
    Conv2d { input: NodeId, weight: NodeId, bias: Option<NodeId>, geom: ConvGeometry },
    BatchNormTrain { input: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { input: NodeId, gamma: NodeId, beta: NodeId, centered: Vec<f64>, inv_std: Vec<f64> },
    MaxPool { input: NodeId, argmax: Vec<usize> },
    AvgPool { input: NodeId, geom: PoolGeometry },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// Batch statistics computed by a train-mode batch norm, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required them.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<NodeId>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter; zeros if the loss did not depend on it.
    pub fn wrt(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Parameter leaves in creation order with their gradients.
    pub fn params(&self) -> impl Iterator<Item = (NodeId, Option<&Tensor>)> + '_ {
        self.params.iter().map(move |&id| (id, self.get(id)))
    }
}

/// Channel count and per-channel plane length for NCHW or NC tensors.
fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    let spatial: usize = shape[2..].iter().product();
    Some((shape[0], shape[1], spatial))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn parents(&self, op: &Op) -> Vec<NodeId> {
        match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Affine { input, .. }
            | Op::Relu(input)
            | Op::Sigmoid(input)
            | Op::Reshape(input)
            | Op::Sum(input)
            | Op::Mean(input)
            | Op::MaxPool { input, .. }
            | Op::AvgPool { input, .. } => vec![input],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::ChannelScale { input, scale } => vec![input, scale],
            Op::Linear { input, weight, bias } | Op::Conv2d { input, weight, bias, .. } => {
                let mut v = vec![input, weight];
                v.extend(bias);
                v
            }
            Op::BatchNormTrain { input, gamma, beta, .. } | Op::BatchNormEval { input, gamma, beta, .. } => {
                vec![input, gamma, beta]
            }
        }
    }

    /// A value that gradients are not taken with respect to.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A trainable leaf; [`Tape::backward`] reports its gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            is_param: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Copies a node's value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let value = self.value(id).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `scale * x + shift` elementwise.
    pub fn affine(&mut self, input: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(input).map(|x| scale * x + shift);
        self.push(v, Op::Affine { input, scale })
    }

    /// Multiplies channel `c` of an NC or NCHW tensor by `scale[c]`.
    pub fn channel_scale(&mut self, input: NodeId, scale: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let s = self.value(scale);
        let (n, c, spatial) = channel_layout(x.shape()).ok_or_else(|| Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "channel_scale needs rank >= 2".into(),
        })?;
        if s.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "channel_scale",
                lhs: x.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let mut out = x.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let f = s.data()[ci];
                for v in &mut out[(ni * c + ci) * spatial..][..spatial] {
                    *v *= f;
                }
            }
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out)?;
        Ok(self.push(v, Op::ChannelScale { input, scale }))
    }

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> NodeId {
        match kind {
            Activation::Relu => self.relu(input),
            Activation::Sigmoid => self.sigmoid(input),
        }
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input).map(sigmoid);
        self.push(v, Op::Sigmoid(input))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(input).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(input)))
    }

    /// Collapses everything after the batch axis.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.value(input).shape().to_vec();
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(input).sum());
        self.push(v, Op::Sum(input))
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let v = Tensor::scalar(x.sum() / x.numel() as f64);
        self.push(v, Op::Mean(input))
    }

    /// `x W^T + b` for `x: N x in`, `W: out x in`, `b: out`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let (n, fin, fout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        let mut out = vec![0.0; n * fout];
        if let Some(b) = bias {
            let b = self.value(b);
            if b.shape() != [fout] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: w.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(b.data());
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        kernels::gemm(
            n,
            fin,
            fout,
            x.data(),
            fin as isize,
            1,
            w.data(),
            1,
            fin as isize,
            beta,
            &mut out,
            fout as isize,
            1,
        );
        let v = Tensor::from_parts(vec![n, fout], out)?;
        Ok(self.push(v, Op::Linear { input, weight, bias }))
    }

    /// Cross-correlation of NCHW input with OIkk weights.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        };
        if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] || w.shape()[2] != w.shape()[3] {
            return Err(mismatch());
        }
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (m, k) = (w.shape()[0], w.shape()[2]);
        let (out_h, out_w) = match (
            conv_out_extent(h, k, stride, padding),
            conv_out_extent(wd, k, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(mismatch()),
        };
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            padding,
            out_h,
            out_w,
        };
        let bias_vals = match bias {
            Some(b) => {
                let b = self.value(b);
                if b.shape() != [m] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d bias",
                        lhs: w.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                Some(b.data().to_vec())
            }
            None => None,
        };
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * p];
        let mut out = vec![0.0; n * m * p];
        let img_len = c * h * wd;
        for ni in 0..n {
            kernels::im2col(&x.data()[ni * img_len..(ni + 1) * img_len], &geom, &mut cols);
            let dst = &mut out[ni * m * p..(ni + 1) * m * p];
            if let Some(bv) = &bias_vals {
                for (mi, plane) in dst.chunks_mut(p).enumerate() {
                    plane.fill(bv[mi]);
                }
            }
            kernels::gemm(
                m,
                rows,
                p,
                w.data(),
                rows as isize,
                1,
                &cols,
                p as isize,
                1,
                if bias_vals.is_some() { 1.0 } else { 0.0 },
                dst,
                p as isize,
                1,
            );
        }
        let v = Tensor::from_parts(vec![n, m, out_h, out_w], out)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    fn bn_check(&self, input: NodeId, gamma: NodeId, beta: NodeId) -> Result<(usize, usize, usize)> {
        let x = self.value(input);
        let layout = channel_layout(x.shape()).ok_or_else(|| Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "batchnorm needs rank >= 2".into(),
        })?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [layout.1] {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm",
                    lhs: x.shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        Ok(layout)
    }

    /// Batch norm using batch statistics. Returns the output node and the
    /// statistics so the caller can update running averages.
    pub fn batchnorm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats)> {
        let (n, c, spatial) = self.bn_check(input, gamma, beta)?;
        let x = self.value(input);
        let count = (n * spatial) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for (ci, m) in mean.iter_mut().enumerate() {
                *m += x.data()[(ni * c + ci) * spatial..][..spatial].iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for ni in 0..n {
            for ci in 0..c {
                let mu = mean[ci];
                var[ci] += x.data()[(ni * c + ci) * spatial..][..spatial]
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / count).collect();
        let unbiased: Vec<f64> = var
            .iter()
            .map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 })
            .collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; x.numel()];
        let mut out = vec![0.0; x.numel()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * spatial;
                for i in off..off + spatial {
                    let h = (x.data()[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = g[ci] * h + b[ci];
                }
            }
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out)?;
        let id = self.push(
            v,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((id, BatchStats { mean, var: unbiased }))
    }

    /// Batch norm with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let (n, c, spatial) = self.bn_check(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::invalid(format!(
                "batchnorm running stats have {} / {} entries for {c} channels",
                running_mean.len(),
                running_var.len()
            )));
        }
        let x = self.value(input);
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut centered = vec![0.0; x.numel()];
        let mut out = vec![0.0; x.numel()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * spatial;
                let scale = g[ci] * inv_std[ci];
                for i in off..off + spatial {
                    let d = x.data()[i] - running_mean[ci];
                    centered[i] = d;
                    out[i] = scale * d + b[ci];
                }
            }
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                centered,
                inv_std,
            },
        ))
    }

    fn pool_geometry(&self, input: NodeId, kernel: usize, stride: usize, op: &'static str) -> Result<PoolGeometry> {
        let x = self.value(input);
        let bad = |reason: String| Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("{op}: {reason}"),
        };
        if x.rank() != 4 {
            return Err(bad("expected NCHW input".into()));
        }
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let out_h = conv_out_extent(h, kernel, stride, 0).ok_or_else(|| bad(format!("kernel {kernel} too large")))?;
        let out_w = conv_out_extent(w, kernel, stride, 0).ok_or_else(|| bad(format!("kernel {kernel} too large")))?;
        Ok(PoolGeometry {
            planes: x.shape()[0] * x.shape()[1],
            height: h,
            width: w,
            kernel,
            stride,
            out_h,
            out_w,
        })
    }

    pub fn maxpool2d(&mut self, input: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let g = self.pool_geometry(input, kernel, stride, "maxpool")?;
        let x = self.value(input);
        let (out, argmax) = kernels::maxpool_forward(x.data(), &g);
        let shape = vec![x.shape()[0], x.shape()[1], g.out_h, g.out_w];
        let v = Tensor::from_parts(shape, out)?;
        Ok(self.push(v, Op::MaxPool { input, argmax }))
    }

    pub fn avgpool2d(&mut self, input: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let g = self.pool_geometry(input, kernel, stride, "avgpool")?;
        let x = self.value(input);
        let out = kernels::avgpool_forward(x.data(), &g);
        let shape = vec![x.shape()[0], x.shape()[1], g.out_h, g.out_w];
        let v = Tensor::from_parts(shape, out)?;
        Ok(self.push(v, Op::AvgPool { input, geom: g }))
    }

    /// Mean softmax cross-entropy of `N x K` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        if z.rank() != 2 || z.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "cross_entropy: logits {:?} vs {} labels",
                z.shape(),
                labels.len()
            )));
        }
        let k = z.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; z.numel()];
        let mut loss = 0.0;
        for (i, (row, prow)) in z.data().chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - max).exp();
                denom += *p;
            }
            for p in prow.iter_mut() {
                *p /= denom;
            }
            loss -= row[labels[i]] - max - denom.ln();
        }
        let v = Tensor::scalar(loss / labels.len() as f64);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter(|(_, n)| n.is_param)
            .map(|(i, _)| NodeId(i))
            .collect();
        // only keep gradients for nodes that actually require them
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, dy.zip_map(vb, "mul", |g, y| g * y)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, dy.zip_map(va, "mul", |g, x| g * x)?);
                }
            }
            Op::Affine { input, scale } => {
                let s = *scale;
                self.accumulate(grads, *input, dy.map(|g| g * s));
            }
            Op::ChannelScale { input, scale } => {
                let x = self.value(*input);
                let s = self.value(*scale);
                let (n, c, spatial) = channel_layout(x.shape()).expect("checked in forward");
                if self.wants(*input) {
                    let mut dx = dy.data().to_vec();
                    for ni in 0..n {
                        for ci in 0..c {
                            let f = s.data()[ci];
                            for v in &mut dx[(ni * c + ci) * spatial..][..spatial] {
                                *v *= f;
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), dx)?);
                }
                if self.wants(*scale) {
                    let mut ds = vec![0.0; c];
                    for ni in 0..n {
                        for (ci, d) in ds.iter_mut().enumerate() {
                            let off = (ni * c + ci) * spatial;
                            *d += dy.data()[off..off + spatial]
                                .iter()
                                .zip(&x.data()[off..off + spatial])
                                .map(|(g, v)| g * v)
                                .sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *scale, Tensor::from_parts(vec![c], ds)?);
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                // derivative at exactly zero is zero
                let dx = dy.zip_map(x, "relu", |g, v| if v > 0.0 { g } else { 0.0 })?;
                self.accumulate(grads, *input, dx);
            }
            Op::Sigmoid(input) => {
                let dx = dy.zip_map(&node.value, "sigmoid", |g, y| g * y * (1.0 - y))?;
                self.accumulate(grads, *input, dx);
            }
            Op::Reshape(input) => {
                let shape = self.value(*input).shape().to_vec();
                self.accumulate(grads, *input, dy.reshape(&shape)?);
            }
            Op::Sum(input) => {
                let shape = self.value(*input).shape().to_vec();
                self.accumulate(grads, *input, Tensor::full(&shape, dy.item()));
            }
            Op::Mean(input) => {
                let x = self.value(*input);
                let g = dy.item() / x.numel() as f64;
                self.accumulate(grads, *input, Tensor::full(x.shape(), g));
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, fin, fout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                if self.wants(*input) {
                    let mut dx = vec![0.0; n * fin];
                    kernels::gemm(
                        n,
                        fout,
                        fin,
                        dy.data(),
                        fout as isize,
                        1,
                        w.data(),
                        fin as isize,
                        1,
                        0.0,
                        &mut dx,
                        fin as isize,
                        1,
                    );
                    self.accumulate(grads, *input, Tensor::from_parts(vec![n, fin], dx)?);
                }
                if self.wants(*weight) {
                    let mut dw = vec![0.0; fout * fin];
                    kernels::gemm(
                        fout,
                        n,
                        fin,
                        dy.data(),
                        1,
                        fout as isize,
                        x.data(),
                        fin as isize,
                        1,
                        0.0,
                        &mut dw,
                        fin as isize,
                        1,
                    );
                    self.accumulate(grads, *weight, Tensor::from_parts(vec![fout, fin], dw)?);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut db = vec![0.0; fout];
                        for row in dy.data().chunks(fout) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_parts(vec![fout], db)?);
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let n = x.shape()[0];
                let m = w.shape()[0];
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                let img_len = geom.channels * geom.height * geom.width;
                let want_x = self.wants(*input);
                let want_w = self.wants(*weight);
                let mut dx = if want_x { vec![0.0; x.numel()] } else { Vec::new() };
                let mut dw = if want_w { vec![0.0; w.numel()] } else { Vec::new() };
                let mut cols = vec![0.0; rows * p];
                let mut dcols = vec![0.0; rows * p];
                for ni in 0..n {
                    let g = &dy.data()[ni * m * p..(ni + 1) * m * p];
                    if want_w {
                        kernels::im2col(&x.data()[ni * img_len..(ni + 1) * img_len], geom, &mut cols);
                        kernels::gemm(
                            m,
                            p,
                            rows,
                            g,
                            p as isize,
                            1,
                            &cols,
                            1,
                            p as isize,
                            1.0,
                            &mut dw,
                            rows as isize,
                            1,
                        );
                    }
                    if want_x {
                        kernels::gemm(
                            rows,
                            m,
                            p,
                            w.data(),
                            1,
                            rows as isize,
                            g,
                            p as isize,
                            1,
                            0.0,
                            &mut dcols,
                            p as isize,
                            1,
                        );
                        kernels::col2im(&dcols, geom, &mut dx[ni * img_len..(ni + 1) * img_len]);
                    }
                }
                if want_x {
                    self.accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), dx)?);
                }
                if want_w {
                    self.accumulate(grads, *weight, Tensor::from_parts(w.shape().to_vec(), dw)?);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut db = vec![0.0; m];
                        for ni in 0..n {
                            for (mi, d) in db.iter_mut().enumerate() {
                                *d += dy.data()[(ni * m + mi) * p..][..p].iter().sum::<f64>();
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_parts(vec![m], db)?);
                    }
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let x = self.value(*input);
                let g = self.value(*gamma).data();
                let (n, c, spatial) = channel_layout(x.shape()).expect("checked in forward");
                let count = (n * spatial) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * spatial;
                        for (d, xh) in dy.data()[off..off + spatial].iter().zip(&xhat[off..off + spatial]) {
                            dgamma[ci] += d * xh;
                            dbeta[ci] += d;
                        }
                    }
                }
                if self.wants(*input) {
                    let mut dx = vec![0.0; x.numel()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * spatial;
                            let k = g[ci] * inv_std[ci] / count;
                            for i in off..off + spatial {
                                dx[i] = k * (count * dy.data()[i] - dbeta[ci] - xhat[i] * dgamma[ci]);
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::from_parts(vec![c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::from_parts(vec![c], dbeta)?);
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                centered,
                inv_std,
            } => {
                let x = self.value(*input);
                let g = self.value(*gamma).data();
                let (n, c, spatial) = channel_layout(x.shape()).expect("checked in forward");
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let want_x = self.wants(*input);
                let mut dx = if want_x { vec![0.0; x.numel()] } else { Vec::new() };
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * spatial;
                        let scale = g[ci] * inv_std[ci];
                        for i in off..off + spatial {
                            let d = dy.data()[i];
                            dgamma[ci] += d * centered[i] * inv_std[ci];
                            dbeta[ci] += d;
                            if want_x {
                                dx[i] = d * scale;
                            }
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::from_parts(vec![c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::from_parts(vec![c], dbeta)?);
            }
            Op::MaxPool { input, argmax } => {
                let x = self.value(*input);
                let mut dx = vec![0.0; x.numel()];
                for (&idx, &g) in argmax.iter().zip(dy.data()) {
                    dx[idx] += g;
                }
                self.accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), dx)?);
            }
            Op::AvgPool { input, geom } => {
                let x = self.value(*input);
                let mut dx = vec![0.0; x.numel()];
                kernels::avgpool_backward(dy.data(), geom, &mut dx);
                self.accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), dx)?);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let z = self.value(*logits);
                let k = z.shape()[1];
                let scale = dy.item() / labels.len() as f64;
                let mut dz = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    dz[i * k + y] -= 1.0;
                }
                for v in &mut dz {
                    *v *= scale;
                }
                self.accumulate(grads, *logits, Tensor::from_parts(z.shape().to_vec(), dz)?);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests;
