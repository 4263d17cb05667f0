use candle_core::Tensor;

use crate::error::{config_bail, Result};
use crate::nn::{
    layers::{global_avg_pool, global_max_pool},
    ops, Conv2d, Init, Linear, ParamBuilder,
};

/// Channel-then-spatial multiplicative attention.
///
/// Channel gate: `sigmoid(mlp(avgpool(x)) + mlp(maxpool(x)))` with a shared two-layer MLP.
/// Spatial gate: `sigmoid(conv7x7([mean_c(x'); max_c(x')]))` on the channel-gated map.
#[derive(Debug, Clone)]
pub struct Cbam {
    fc1: Linear,
    fc2: Linear,
    spatial: Conv2d,
}

/// Gate values computed by one CBAM application.
#[derive(Debug, Clone)]
pub struct CbamGates {
    /// `(B, C, 1, 1)`
    pub channel: Tensor,
    /// `(B, 1, H, W)`
    pub spatial: Tensor,
}

impl Cbam {
    pub fn new(b: &ParamBuilder, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            config_bail!("CBAM: {channels} channels not divisible by reduction {reduction}");
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(&b.pp("fc1"), channels, hidden, true, Init::Kaiming { fan: channels })?,
            fc2: Linear::new(&b.pp("fc2"), hidden, channels, true, Init::Kaiming { fan: hidden })?,
            spatial: Conv2d::new(&b.pp("spatial"), 2, 1, 7, 1, 3, true, Init::Kaiming { fan: 2 * 49 })?,
        })
    }

    fn mlp(&self, v: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(v)?.relu()?)
    }

    /// Returns the gated output together with both gates.
    pub fn forward_with_gates(&self, x: &Tensor) -> Result<(Tensor, CbamGates)> {
        let (b, c, _, _) = x.dims4()?;
        let avg = global_avg_pool(x)?.reshape((b, c))?;
        let max = global_max_pool(x)?.reshape((b, c))?;
        let channel = ops::sigmoid(&(self.mlp(&avg)? + self.mlp(&max)?)?)?.reshape((b, c, 1, 1))?;
        let xc = x.broadcast_mul(&channel)?;
        let pooled = Tensor::cat(
            &[xc.mean_keepdim(1)?, xc.max_keepdim(1)?],
            1,
        )?;
        let spatial = ops::sigmoid(&self.spatial.forward(&pooled)?)?;
        let out = xc.broadcast_mul(&spatial)?;
        Ok((out, CbamGates { channel, spatial }))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_gates(x)?.0)
    }
}
