//! The two-head network and its persisted state.

pub mod cbam;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod fpn;
pub mod net;
pub mod swin;

use candle_core::{DType, Tensor};

pub use cbam::{Cbam, CbamGates};
pub use config::{ModelConfig, Profile, TaskHead};
pub use decoder::{Decoder, DecoderBlock, DecoderOutput};
pub use fpn::Fpn;
pub use net::{Mode, TwoHeadSwinFpn};
pub use swin::SwinBackbone;

use crate::error::{Error, Result};
use crate::losses::UncertaintyWeights;
use crate::nn::ParamStore;

/// Ordered multi-scale feature maps, finest first, each `(B, C_i, H_i, W_i)`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Self {
        Self { levels }
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// `(channels, height, width)` per level.
    pub fn shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        self.levels
            .iter()
            .map(|t| {
                let (_, c, h, w) = t.dims4()?;
                Ok((c, h, w))
            })
            .collect()
    }

    pub fn detach(&self) -> Self {
        Self {
            levels: self.levels.iter().map(Tensor::detach).collect(),
        }
    }
}

/// Network outputs. Heads that a single-task configuration does not build are `None`.
#[derive(Debug, Clone)]
pub struct PredictionPair {
    /// `(B,)` manipulation probability per image.
    pub score: Option<Tensor>,
    /// `(B, 1, S, S)` per-pixel manipulation probability.
    pub mask: Option<Tensor>,
    /// `(B, 1, S/8, S/8)`; training mode only.
    pub aux_mask: Option<Tensor>,
}

impl PredictionPair {
    pub fn score(&self) -> Result<&Tensor> {
        self.score
            .as_ref()
            .ok_or_else(|| Error::Config("model has no detection head".into()))
    }

    pub fn mask(&self) -> Result<&Tensor> {
        self.mask
            .as_ref()
            .ok_or_else(|| Error::Config("model has no segmentation head".into()))
    }
}

/// A configuration together with every named parameter and buffer it owns, including the
/// learnable task-uncertainty terms of multitask models.
#[derive(Debug)]
pub struct ModelState {
    config: ModelConfig,
    store: ParamStore,
}

impl ModelState {
    /// Builds fresh, seed-initialized state. `log_var_init` seeds the uncertainty terms
    /// `(s_det, s_seg)` of multitask models.
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, log_var_init: (f64, f64)) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, dtype);
        TwoHeadSwinFpn::new(&store.builder(), config)?;
        if config.multitask {
            UncertaintyWeights::new(&store.builder().pp("uncertainty"), log_var_init.0, log_var_init.1)?;
        }
        Ok(Self {
            config: config.clone(),
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Network whose parameters are tracked by autograd.
    pub fn network(&self) -> Result<TwoHeadSwinFpn> {
        TwoHeadSwinFpn::new(&self.store.builder(), &self.config)
    }

    /// Network view for inference; shares storage, builds no autograd graph.
    pub fn inference_network(&self) -> Result<TwoHeadSwinFpn> {
        TwoHeadSwinFpn::new(&self.store.detached_builder(), &self.config)
    }

    pub fn uncertainty(&self) -> Result<Option<UncertaintyWeights>> {
        if !self.config.multitask {
            return Ok(None);
        }
        Ok(Some(UncertaintyWeights::new(&self.store.builder().pp("uncertainty"), 0.0, 0.0)?))
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }
}
