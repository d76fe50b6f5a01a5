use rand::Rng;

use super::{Activation, BatchNorm2d, Conv2d, Layer, Linear, Network, Projection};
use crate::autodiff::conv_out_extent;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ARCH_NAMES: [&str; 2] = ["small-cnn", "resnet-tiny"];

// He-normal, fan-in mode
fn conv<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, rng: &mut R) -> Conv2d {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    Conv2d {
        weight: Tensor::randn(&[cout, cin, k, k], std, rng),
        bias: None,
        stride,
        padding,
    }
}

fn linear<R: Rng + ?Sized>(fin: usize, fout: usize, rng: &mut R) -> Linear {
    let bound = 1.0 / (fin as f64).sqrt();
    Linear {
        weight: Tensor::uniform(&[fout, fin], -bound, bound, rng),
        bias: Some(Tensor::zeros(&[fout])),
    }
}

fn spatial_after(h: usize, w: usize, stride: usize) -> Result<(usize, usize)> {
    match (conv_out_extent(h, 3, stride, 1), conv_out_extent(w, 3, stride, 1)) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(Error::InvalidShape {
            shape: vec![h, w],
            reason: "input too small for this architecture".into(),
        }),
    }
}

fn head<R: Rng + ?Sized>(layers: &mut Vec<Layer>, channels: usize, h: usize, w: usize, classes: usize, rng: &mut R) -> Result<()> {
    if h != w {
        return Err(Error::InvalidShape {
            shape: vec![h, w],
            reason: "global pooling needs a square feature map".into(),
        });
    }
    layers.push(Layer::AvgPool { kernel: h, stride: h });
    layers.push(Layer::Flatten);
    layers.push(Layer::Linear(linear(channels, classes, rng)));
    Ok(())
}

fn small_cnn<R: Rng + ?Sized>(input: &[usize], classes: usize, rng: &mut R) -> Result<Vec<Layer>> {
    let mut layers = Vec::new();
    let (mut cin, mut h, mut w) = (input[0], input[1], input[2]);
    for (cout, stride) in [(16, 1), (32, 2), (64, 2)] {
        layers.push(Layer::Conv(conv(cin, cout, 3, stride, 1, rng)));
        layers.push(Layer::BatchNorm(BatchNorm2d::new(cout)));
        layers.push(Layer::Activation(Activation::Relu));
        (h, w) = spatial_after(h, w, stride)?;
        cin = cout;
    }
    // a 2x2 pool keeps a coarse spatial grid for the classifier
    let k = 2.min(h).min(w);
    layers.push(Layer::AvgPool { kernel: k, stride: k });
    layers.push(Layer::Flatten);
    layers.push(Layer::Linear(linear(cin * (h / k) * (w / k), classes, rng)));
    Ok(layers)
}

fn resnet_tiny<R: Rng + ?Sized>(input: &[usize], classes: usize, rng: &mut R) -> Result<Vec<Layer>> {
    let mut layers = Vec::new();
    let (mut cin, mut h, mut w) = (input[0], input[1], input[2]);
    layers.push(Layer::Conv(conv(cin, 8, 3, 1, 1, rng)));
    layers.push(Layer::BatchNorm(BatchNorm2d::new(8)));
    layers.push(Layer::Activation(Activation::Relu));
    cin = 8;
    for (stage, width) in [8, 16, 32].into_iter().enumerate() {
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let source = layers.len() - 1;
            layers.push(Layer::Conv(conv(cin, width, 3, stride, 1, rng)));
            layers.push(Layer::BatchNorm(BatchNorm2d::new(width)));
            layers.push(Layer::Activation(Activation::Relu));
            layers.push(Layer::Conv(conv(width, width, 3, 1, 1, rng)));
            layers.push(Layer::BatchNorm(BatchNorm2d::new(width)));
            let projection = (stride != 1 || cin != width).then(|| {
                Box::new(Projection {
                    conv: conv(cin, width, 1, stride, 0, rng),
                    bn: BatchNorm2d::new(width),
                })
            });
            layers.push(Layer::ResidualAdd { source, projection });
            layers.push(Layer::Activation(Activation::Relu));
            (h, w) = spatial_after(h, w, stride)?;
            cin = width;
        }
    }
    head(&mut layers, cin, h, w, classes, rng)?;
    Ok(layers)
}

/// Builds a freshly initialized network by name.
pub fn build_arch<R: Rng + ?Sized>(name: &str, input_shape: &[usize], num_classes: usize, rng: &mut R) -> Result<Network> {
    if input_shape.len() != 3 || input_shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: input_shape.to_vec(),
            reason: "expected C x H x W".into(),
        });
    }
    if num_classes == 0 {
        return Err(Error::invalid("num_classes must be positive"));
    }
    let layers = match name {
        "small-cnn" => small_cnn(input_shape, num_classes, rng)?,
        "resnet-tiny" => resnet_tiny(input_shape, num_classes, rng)?,
        _ => {
            return Err(Error::UnknownArch {
                name: name.to_string(),
                valid: ARCH_NAMES.join(", "),
            })
        }
    };
    Network::new(input_shape.to_vec(), num_classes, layers)
}
