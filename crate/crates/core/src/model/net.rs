use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::decoder::Decoder;
use super::fpn::Fpn;
use super::swin::SwinBackbone;
use super::{FeaturePyramid, PredictionPair};
use crate::error::Result;
use crate::nn::{layers, ops, Conv2d, Init, ParamBuilder};

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Deterministic: dropout off, batch norm uses running statistics, no auxiliary mask.
    Eval,
    Train {
        /// Seeds the detection-head dropout mask.
        dropout_seed: u64,
        /// Cuts gradient flow into the backbone.
        freeze_backbone: bool,
    },
}

impl Mode {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Backbone → FPN → CBAM decoder, with an image-level detection head on the deepest backbone
/// level and a pixel-level segmentation head on the decoder output.
#[derive(Debug, Clone)]
pub struct TwoHeadSwinFpn {
    config: ModelConfig,
    backbone: SwinBackbone,
    fpn: Option<Fpn>,
    decoder: Option<Decoder>,
    det_head: Option<Conv2d>,
    seg_head: Option<Conv2d>,
    aux_head: Option<Conv2d>,
}

impl TwoHeadSwinFpn {
    pub fn new(b: &ParamBuilder, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let backbone = SwinBackbone::new(&b.pp("backbone"), config)?;
        let head_init = Init::TruncNormal { std: 0.01 };
        let det_head = if config.has_detection_head() {
            let c3 = config.stage_dims[3];
            Some(Conv2d::new(&b.pp("det_head.conv"), c3, 1, 1, 1, 0, true, head_init)?)
        } else {
            None
        };
        let (fpn, decoder, seg_head, aux_head) = if config.has_segmentation_head() {
            let f = config.fpn_channels;
            (
                Some(Fpn::new(&b.pp("fpn"), config)?),
                Some(Decoder::new(&b.pp("decoder"), config)?),
                Some(Conv2d::new(&b.pp("seg_head.conv"), f, 1, 1, 1, 0, true, head_init)?),
                Some(Conv2d::new(&b.pp("aux_head.conv"), f, 1, 1, 1, 0, true, head_init)?),
            )
        } else {
            (None, None, None, None)
        };
        Ok(Self {
            config: config.clone(),
            backbone,
            fpn,
            decoder,
            det_head,
            seg_head,
            aux_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &SwinBackbone {
        &self.backbone
    }

    pub fn fpn(&self) -> Option<&Fpn> {
        self.fpn.as_ref()
    }

    pub fn decoder(&self) -> Option<&Decoder> {
        self.decoder.as_ref()
    }

    /// Image-level score from the deepest backbone level: `sigmoid(GAP(dropout(conv1x1(f3))))`.
    fn detect(&self, head: &Conv2d, f3: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut logits = head.forward(f3)?;
        if let Mode::Train { dropout_seed, .. } = mode {
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
            logits = layers::dropout(&logits, self.config.dropout_rate, &mut rng)?;
        }
        let b = logits.dim(0)?;
        Ok(ops::sigmoid(&layers::global_avg_pool(&logits)?.reshape(b)?)?)
    }

    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<PredictionPair> {
        let mut features = self.backbone.forward(images)?;
        if let Mode::Train {
            freeze_backbone: true,
            ..
        } = mode
        {
            features = features.detach();
        }
        let score = match &self.det_head {
            Some(head) => Some(self.detect(head, features.level(3), mode)?),
            None => None,
        };
        let (mask, aux_mask) = match (&self.fpn, &self.decoder, &self.seg_head, &self.aux_head) {
            (Some(fpn), Some(decoder), Some(seg), Some(aux)) => {
                let pyramid = fpn.forward(&features)?;
                let decoded = decoder.forward_t(&pyramid, mode.is_train())?;
                let s = self.config.input_size;
                let logits = ops::resize_bilinear(&seg.forward(&decoded.features)?, s, s)?;
                let mask = ops::sigmoid(&logits)?;
                let aux_mask = if mode.is_train() {
                    Some(ops::sigmoid(&aux.forward(&decoded.aux_features)?)?)
                } else {
                    None
                };
                (Some(mask), aux_mask)
            }
            _ => (None, None),
        };
        Ok(PredictionPair {
            score,
            mask,
            aux_mask,
        })
    }

    /// Runs only backbone and FPN (exposed for shape checks).
    pub fn pyramid(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let features = self.backbone.forward(images)?;
        match &self.fpn {
            Some(fpn) => fpn.forward(&features),
            None => Ok(features),
        }
    }
}
