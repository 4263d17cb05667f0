use super::config::ModelConfig;
use super::FeaturePyramid;
use crate::error::{config_bail, Result};
use crate::nn::{Conv2d, Init, ParamBuilder};

/// Feature pyramid: 1×1 lateral projections to a common width, then (when enabled) a
/// top-down pathway of nearest ×2 upsampling, elementwise addition and 3×3 smoothing.
#[derive(Debug, Clone)]
pub struct Fpn {
    laterals: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    in_channels: Vec<usize>,
}

impl Fpn {
    pub fn new(b: &ParamBuilder, config: &ModelConfig) -> Result<Self> {
        let out = config.fpn_channels;
        let laterals = config
            .stage_dims
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                Conv2d::new(&b.pp(format!("lateral{i}")), c, out, 1, 1, 0, true, Init::Kaiming { fan: out })
            })
            .collect::<Result<Vec<_>>>()?;
        let smooth = if config.use_fpn {
            (0..4)
                .map(|i| {
                    Conv2d::new(&b.pp(format!("smooth{i}")), out, out, 3, 1, 1, true, Init::Kaiming { fan: out * 9 })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            laterals,
            smooth,
            in_channels: config.stage_dims.clone(),
        })
    }

    pub fn forward(&self, features: &FeaturePyramid) -> Result<FeaturePyramid> {
        if features.len() != 4 {
            config_bail!("FPN expects 4 levels, got {}", features.len());
        }
        let mut lateral = Vec::with_capacity(4);
        for (i, (conv, f)) in self.laterals.iter().zip(features.levels()).enumerate() {
            let c = f.dim(1)?;
            if c != self.in_channels[i] {
                config_bail!("FPN level {i}: expected {} channels, got {c}", self.in_channels[i]);
            }
            lateral.push(conv.forward(f)?);
        }
        if self.smooth.is_empty() {
            return Ok(FeaturePyramid::new(lateral));
        }
        let mut merged = vec![lateral[3].clone()];
        for i in (0..3).rev() {
            let coarser = merged.last().unwrap();
            let (_, _, h, w) = lateral[i].dims4()?;
            merged.push((&lateral[i] + coarser.upsample_nearest2d(h, w)?)?);
        }
        merged.reverse();
        let levels = merged
            .iter()
            .zip(&self.smooth)
            .map(|(m, conv)| conv.forward(m))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid::new(levels))
    }

    /// The lateral projection of level `i`.
    pub fn lateral(&self, level: usize) -> &Conv2d {
        &self.laterals[level]
    }
}
