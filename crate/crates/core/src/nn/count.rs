use serde::{Deserialize, Serialize};

use super::{Layer, Network};
use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    /// Trainable parameters; batch-norm running statistics are excluded.
    pub params: u64,
    /// Multiply-accumulates per example, counting conv and linear layers only.
    pub macs: u64,
}

/// Exact parameter and MAC counts for one example at the declared input shape.
pub fn count_params_flops(net: &Network) -> Result<Counts> {
    let shapes = net.infer_shapes()?;
    let mut c = Counts::default();
    for (i, layer) in net.layers.iter().enumerate() {
        c.params += layer.params().iter().map(|t| t.numel() as u64).sum::<u64>();
        let out = &shapes[i];
        match layer {
            Layer::Conv(conv) => {
                let k = conv.kernel() as u64;
                c.macs += k * k * (conv.in_channels() * conv.out_channels() * out[1] * out[2]) as u64;
            }
            Layer::Linear(l) => c.macs += l.weight.numel() as u64,
            Layer::ResidualAdd {
                projection: Some(p), ..
            } => {
                let k = p.conv.kernel() as u64;
                c.macs += k * k * (p.conv.in_channels() * p.conv.out_channels() * out[1] * out[2]) as u64;
            }
            _ => {}
        }
    }
    Ok(c)
}
