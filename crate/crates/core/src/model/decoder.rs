use candle_core::Tensor;

use super::cbam::Cbam;
use super::config::ModelConfig;
use super::FeaturePyramid;
use crate::error::{config_bail, Result};
use crate::nn::{ops, BatchNorm2d, Conv2d, Init, ParamBuilder};

/// conv3×3 → batch norm → ReLU → optional CBAM.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
    cbam: Option<Cbam>,
}

impl DecoderBlock {
    pub fn new(b: &ParamBuilder, in_c: usize, out_c: usize, cbam: Option<usize>) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&b.pp("conv"), in_c, out_c, 3, 1, 1, false, Init::Kaiming { fan: out_c * 9 })?,
            bn: BatchNorm2d::new(&b.pp("bn"), out_c)?,
            cbam: cbam.map(|r| Cbam::new(&b.pp("cbam"), out_c, r)).transpose()?,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn.forward_t(&self.conv.forward(x)?, train)?.relu()?;
        match &self.cbam {
            Some(cbam) => cbam.forward(&y),
            None => Ok(y),
        }
    }

    pub fn cbam(&self) -> Option<&Cbam> {
        self.cbam.as_ref()
    }
}

/// Decoder result: the finest map (input/4) and the intermediate map at input/8 used for
/// deep supervision.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub features: Tensor,
    pub aux_features: Tensor,
}

/// UNet-style coarse-to-fine decoder over the pyramid, using `p2, p1, p0` as skips.
#[derive(Debug, Clone)]
pub struct Decoder {
    blocks: Vec<DecoderBlock>,
}

impl Decoder {
    pub fn new(b: &ParamBuilder, config: &ModelConfig) -> Result<Self> {
        let f = config.fpn_channels;
        let reduction = config.use_cbam.then_some(config.cbam_reduction);
        let blocks = (0..3)
            .map(|i| DecoderBlock::new(&b.pp(format!("block{i}")), 2 * f, f, reduction))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn forward_t(&self, pyramid: &FeaturePyramid, train: bool) -> Result<DecoderOutput> {
        if pyramid.len() != 4 {
            config_bail!("decoder expects 4 pyramid levels, got {}", pyramid.len());
        }
        let mut d = pyramid.level(3).clone();
        let mut aux = None;
        for (block, level) in self.blocks.iter().zip([2usize, 1, 0]) {
            let skip = pyramid.level(level);
            let (_, _, h, w) = skip.dims4()?;
            let up = ops::resize_bilinear(&d, h, w)?;
            d = block.forward_t(&Tensor::cat(&[&up, skip], 1)?, train)?;
            if level == 1 {
                aux = Some(d.clone());
            }
        }
        Ok(DecoderOutput {
            features: d,
            aux_features: aux.expect("level 1 is always visited"),
        })
    }

    pub fn blocks(&self) -> &[DecoderBlock] {
        &self.blocks
    }
}
