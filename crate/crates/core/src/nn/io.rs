//! Architecture description and named tensors, for checkpointing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Activation, BatchNorm2d, Conv2d, Layer, Linear, Network, Projection};
use crate::data::{Payload, Section};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerDesc {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Batchnorm {
        channels: usize,
        eps: u64,
        momentum: u64,
    },
    Activation {
        function: String,
    },
    Maxpool {
        kernel: usize,
        stride: usize,
    },
    Avgpool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    ResidualAdd {
        source: usize,
        projection: Option<Box<(LayerDesc, LayerDesc)>>,
    },
}

/// Shape-only description of a network; weights travel separately.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDesc {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerDesc>,
}

fn conv_desc(c: &Conv2d) -> LayerDesc {
    LayerDesc::Conv {
        in_channels: c.in_channels(),
        out_channels: c.out_channels(),
        kernel: c.kernel(),
        stride: c.stride,
        padding: c.padding,
        bias: c.bias.is_some(),
    }
}

// eps and momentum stored as raw bits so the round trip is exact
fn bn_desc(b: &BatchNorm2d) -> LayerDesc {
    LayerDesc::Batchnorm {
        channels: b.channels(),
        eps: b.eps.to_bits(),
        momentum: b.momentum.to_bits(),
    }
}

fn push_conv<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, c: &'a Conv2d) {
    out.push((format!("{prefix}.weight"), &c.weight));
    if let Some(b) = &c.bias {
        out.push((format!("{prefix}.bias"), b));
    }
}

fn push_bn<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, b: &'a BatchNorm2d) {
    out.push((format!("{prefix}.gamma"), &b.gamma));
    out.push((format!("{prefix}.beta"), &b.beta));
    out.push((format!("{prefix}.running_mean"), &b.running_mean));
    out.push((format!("{prefix}.running_var"), &b.running_var));
}

impl Network {
    pub fn describe(&self) -> ArchDesc {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => conv_desc(c),
                Layer::BatchNorm(b) => bn_desc(b),
                Layer::Activation(a) => LayerDesc::Activation {
                    function: match a {
                        Activation::Relu => "relu",
                        Activation::Sigmoid => "sigmoid",
                    }
                    .into(),
                },
                Layer::MaxPool { kernel, stride } => LayerDesc::Maxpool {
                    kernel: *kernel,
                    stride: *stride,
                },
                Layer::AvgPool { kernel, stride } => LayerDesc::Avgpool {
                    kernel: *kernel,
                    stride: *stride,
                },
                Layer::Flatten => LayerDesc::Flatten,
                Layer::Linear(lin) => LayerDesc::Linear {
                    in_features: lin.weight.shape()[1],
                    out_features: lin.weight.shape()[0],
                    bias: lin.bias.is_some(),
                },
                Layer::ResidualAdd { source, projection } => LayerDesc::ResidualAdd {
                    source: *source,
                    projection: projection
                        .as_ref()
                        .map(|p| Box::new((conv_desc(&p.conv), bn_desc(&p.bn)))),
                },
            })
            .collect();
        ArchDesc {
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            layers,
        }
    }

    /// All weights and running statistics with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            match layer {
                Layer::Conv(c) => push_conv(&mut out, &p, c),
                Layer::BatchNorm(b) => push_bn(&mut out, &p, b),
                Layer::Linear(l) => {
                    out.push((format!("{p}.weight"), &l.weight));
                    if let Some(b) = &l.bias {
                        out.push((format!("{p}.bias"), b));
                    }
                }
                Layer::ResidualAdd {
                    projection: Some(proj), ..
                } => {
                    push_conv(&mut out, &format!("{p}.proj.conv"), &proj.conv);
                    push_bn(&mut out, &format!("{p}.proj.bn"), &proj.bn);
                }
                _ => {}
            }
        }
        out
    }

    /// Rebuilds a network from its description and named tensors.
    pub fn from_desc(desc: &ArchDesc, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let take = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Corrupt {
                    what: "network checkpoint",
                    reason: format!("missing tensor {name}"),
                })?;
            if t.shape() != shape {
                return Err(Error::Corrupt {
                    what: "network checkpoint",
                    reason: format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape()),
                });
            }
            Ok(t.clone())
        };
        let conv = |p: &str, d: &LayerDesc| -> Result<Conv2d> {
            let LayerDesc::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
            } = *d
            else {
                return Err(Error::invalid("projection must start with a conv"));
            };
            Ok(Conv2d {
                weight: take(format!("{p}.weight"), &[out_channels, in_channels, kernel, kernel])?,
                bias: if bias {
                    Some(take(format!("{p}.bias"), &[out_channels])?)
                } else {
                    None
                },
                stride,
                padding,
            })
        };
        let bn = |p: &str, d: &LayerDesc| -> Result<BatchNorm2d> {
            let LayerDesc::Batchnorm { channels, eps, momentum } = *d else {
                return Err(Error::invalid("projection must end with a batch norm"));
            };
            Ok(BatchNorm2d {
                gamma: take(format!("{p}.gamma"), &[channels])?,
                beta: take(format!("{p}.beta"), &[channels])?,
                running_mean: take(format!("{p}.running_mean"), &[channels])?,
                running_var: take(format!("{p}.running_var"), &[channels])?,
                eps: f64::from_bits(eps),
                momentum: f64::from_bits(momentum),
            })
        };
        let mut layers = Vec::with_capacity(desc.layers.len());
        for (i, d) in desc.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            layers.push(match d {
                LayerDesc::Conv { .. } => Layer::Conv(conv(&p, d)?),
                LayerDesc::Batchnorm { .. } => Layer::BatchNorm(bn(&p, d)?),
                LayerDesc::Activation { function } => Layer::Activation(match function.as_str() {
                    "relu" => Activation::Relu,
                    "sigmoid" => Activation::Sigmoid,
                    other => return Err(Error::invalid(format!("unknown activation {other:?}"))),
                }),
                LayerDesc::Maxpool { kernel, stride } => Layer::MaxPool {
                    kernel: *kernel,
                    stride: *stride,
                },
                LayerDesc::Avgpool { kernel, stride } => Layer::AvgPool {
                    kernel: *kernel,
                    stride: *stride,
                },
                LayerDesc::Flatten => Layer::Flatten,
                LayerDesc::Linear {
                    in_features,
                    out_features,
                    bias,
                } => Layer::Linear(Linear {
                    weight: take(format!("{p}.weight"), &[*out_features, *in_features])?,
                    bias: if *bias {
                        Some(take(format!("{p}.bias"), &[*out_features])?)
                    } else {
                        None
                    },
                }),
                LayerDesc::ResidualAdd { source, projection } => Layer::ResidualAdd {
                    source: *source,
                    projection: match projection {
                        Some(pd) => Some(Box::new(Projection {
                            conv: conv(&format!("{p}.proj.conv"), &pd.0)?,
                            bn: bn(&format!("{p}.proj.bn"), &pd.1)?,
                        })),
                        None => None,
                    },
                },
            });
        }
        Network::new(desc.input_shape.clone(), desc.num_classes, layers)
    }
}

pub const ARCH_SECTION: &str = "arch";

impl Network {
    /// Checkpoint sections: the JSON description followed by every tensor.
    pub fn to_sections(&self) -> Vec<Section> {
        let json = serde_json::to_vec(&self.describe()).expect("arch description serializes");
        std::iter::once(Section::bytes(ARCH_SECTION, json))
            .chain(self.named_tensors().into_iter().map(|(n, t)| Section::tensor(n, t.clone())))
            .collect()
    }

    pub fn from_sections(sections: &[Section]) -> Result<Self> {
        let mut desc = None;
        let mut tensors = BTreeMap::new();
        for s in sections {
            match (&s.payload, s.name.as_str()) {
                (Payload::U8(b), ARCH_SECTION) => desc = Some(serde_json::from_slice::<ArchDesc>(b)?),
                (Payload::F64(t), name) => {
                    tensors.insert(name.to_string(), t.clone());
                }
                _ => {}
            }
        }
        let desc = desc.ok_or_else(|| Error::Corrupt {
            what: "network checkpoint",
            reason: "missing arch section".into(),
        })?;
        Self::from_desc(&desc, &tensors)
    }
}
