//! Training objective: focal detection loss, Dice-based segmentation losses and
//! uncertainty-weighted task balancing.
//!
//! Every loss accepts soft targets in `[0, 1]` (needed once MixUp blends labels); only
//! [`focal_loss`] insists on hard `{0, 1}` labels.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{config_bail, input_bail, Error, Result};
use crate::nn::{Init, ParamBuilder};

pub const PROB_CLAMP: f64 = 1e-7;

/// How the focal α weights the two classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// α on both classes.
    #[default]
    Symmetric,
    /// α on positives, 1 − α on negatives.
    Asymmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub focal_alpha_mode: AlphaMode,
    pub dice_epsilon: f64,
    pub w_main: f64,
    pub w_aux: f64,
    pub w_bound: f64,
    pub boundary_band_px: usize,
    pub init_log_var_det: f64,
    pub init_log_var_seg: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            focal_alpha_mode: AlphaMode::Symmetric,
            dice_epsilon: 1.0,
            w_main: 1.0,
            w_aux: 0.4,
            w_bound: 0.2,
            boundary_band_px: 3,
            init_log_var_det: 0.0,
            init_log_var_seg: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0) {
            config_bail!("focal_gamma must be >= 0, got {}", self.focal_gamma);
        }
        if !(self.dice_epsilon > 0.0) {
            config_bail!("dice_epsilon must be > 0, got {}", self.dice_epsilon);
        }
        for (name, w) in [
            ("focal_alpha", self.focal_alpha),
            ("w_main", self.w_main),
            ("w_aux", self.w_aux),
            ("w_bound", self.w_bound),
        ] {
            if !(w >= 0.0) {
                config_bail!("{name} must be >= 0, got {w}");
            }
        }
        if !self.init_log_var_det.is_finite() || !self.init_log_var_seg.is_finite() {
            config_bail!("initial log-variances must be finite");
        }
        Ok(())
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        input_bail!("{what}: prediction shape {:?} differs from target shape {:?}", a.dims(), b.dims());
    }
    Ok(())
}

fn clamp_prob(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?)
}

/// Elementwise `-(y log p + (1 - y) log(1 - p))` with `p` clamped away from 0 and 1.
pub fn bce_elementwise(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let p = clamp_prob(pred)?;
    let pos = target.mul(&p.log()?)?;
    let neg = target.affine(-1.0, 1.0)?.mul(&p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?)
}

/// Focal loss over a batch of image scores with hard labels.
pub fn focal_loss(scores: &Tensor, labels: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let values = labels.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(bad) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
        input_bail!("focal_loss labels must be 0 or 1, found {bad}");
    }
    focal_loss_soft(scores, labels, cfg)
}

/// `mean(-α [y (1-p)^γ log p + (1-y) p^γ log(1-p)])`; agrees with the hard-label form for
/// `y ∈ {0, 1}`.
pub fn focal_loss_soft(scores: &Tensor, targets: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    check_same_shape(scores, targets, "focal_loss")?;
    if scores.elem_count() == 0 {
        input_bail!("focal_loss on an empty batch");
    }
    let p = clamp_prob(scores)?;
    let q = p.affine(-1.0, 1.0)?;
    let g = cfg.focal_gamma;
    let (pos_mod, neg_mod) = if g == 0.0 {
        (q.ones_like()?, p.ones_like()?)
    } else {
        (q.powf(g)?, p.powf(g)?)
    };
    let (a_pos, a_neg) = match cfg.focal_alpha_mode {
        AlphaMode::Symmetric => (cfg.focal_alpha, cfg.focal_alpha),
        AlphaMode::Asymmetric => (cfg.focal_alpha, 1.0 - cfg.focal_alpha),
    };
    let pos = (targets.mul(&pos_mod)?.mul(&p.log()?)? * a_pos)?;
    let neg = (targets.affine(-1.0, 1.0)?.mul(&neg_mod)?.mul(&q.log()?)? * a_neg)?;
    Ok((pos + neg)?.neg()?.mean_all()?)
}

/// `1 - (2 Σ p g + ε) / (Σ p + Σ g + ε)` summed over the whole batch.
pub fn dice_loss(pred: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    check_same_shape(pred, target, "dice_loss")?;
    let eps = cfg.dice_epsilon;
    let inter = pred.mul(target)?.sum_all()?;
    let denom = (pred.sum_all()? + target.sum_all()?)?;
    let ratio = (inter * 2.0)?.affine(1.0, eps)?.div(&denom.affine(1.0, eps)?)?;
    Ok(ratio.affine(-1.0, 1.0)?)
}

fn max_filter(x: &Tensor, k: usize) -> Result<Tensor> {
    let padded = x.pad_with_zeros(2, k, k)?.pad_with_zeros(3, k, k)?;
    Ok(padded.max_pool2d_with_stride(2 * k + 1, 1)?)
}

/// Grayscale dilation with a `(2k+1)²` square; the outside of the image counts as 0.
pub fn dilate(t: &Tensor, k: usize) -> Result<Tensor> {
    max_filter(t, k)
}

/// Grayscale erosion with a `(2k+1)²` square, as `1 - dilate(1 - t)`. The outside of the
/// image counts as 1, so a region touching the border is not eroded from that side.
pub fn erode(t: &Tensor, k: usize) -> Result<Tensor> {
    Ok(max_filter(&t.affine(-1.0, 1.0)?, k)?.affine(-1.0, 1.0)?)
}

/// 0/1 indicator of the pixels where `dilate(target, k) != erode(target, k)`.
pub fn boundary_band(target: &Tensor, k: usize) -> Result<Tensor> {
    let target = target.detach();
    Ok(dilate(&target, k)?.ne(&erode(&target, k)?)?.to_dtype(target.dtype())?)
}

/// Binary cross-entropy averaged over the boundary band of the target; 0 if the band is empty.
pub fn boundary_loss(pred: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    check_same_shape(pred, target, "boundary_loss")?;
    if pred.rank() != 4 {
        input_bail!("boundary_loss expects (B, 1, H, W), got {:?}", pred.dims());
    }
    let band = boundary_band(target, cfg.boundary_band_px)?;
    let count = band.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if count == 0.0 {
        return Ok(pred.sum_all()?.affine(0.0, 0.0)?);
    }
    Ok((bce_elementwise(pred, target)?.mul(&band)?.sum_all()? / count)?)
}

/// Max-pools a mask down to `(h, w)`; any positive pixel in a cell marks the cell.
pub fn downsample_target(target: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, th, tw) = target.dims4()?;
    if th % h != 0 || tw % w != 0 || th / h != tw / w {
        input_bail!("cannot max-pool a {th}x{tw} mask to {h}x{w}");
    }
    Ok(target.max_pool2d(th / h)?)
}

/// Per-term values of [`segmentation_loss`].
#[derive(Debug, Clone)]
pub struct SegmentationTerms {
    pub main: Tensor,
    pub aux: Option<Tensor>,
    pub boundary: Tensor,
    pub total: Tensor,
}

/// `w_main·Dice(pred) + w_aux·Dice(aux_pred, maxpool(target)) + w_bound·boundary(pred)`.
/// Without `aux_pred` the auxiliary term is dropped.
pub fn segmentation_terms(
    pred: &Tensor,
    aux_pred: Option<&Tensor>,
    target: &Tensor,
    cfg: &LossConfig,
) -> Result<SegmentationTerms> {
    let main = dice_loss(pred, target, cfg)?;
    let boundary = boundary_loss(pred, target, cfg)?;
    let mut total = ((&main * cfg.w_main)? + (&boundary * cfg.w_bound)?)?;
    let aux = match aux_pred {
        Some(aux_pred) => {
            let (_, _, h, w) = aux_pred.dims4()?;
            let aux = dice_loss(aux_pred, &downsample_target(target, h, w)?, cfg)?;
            total = (total + (&aux * cfg.w_aux)?)?;
            Some(aux)
        }
        None => None,
    };
    Ok(SegmentationTerms {
        main,
        aux,
        boundary,
        total,
    })
}

pub fn segmentation_loss(pred: &Tensor, aux_pred: Option<&Tensor>, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    Ok(segmentation_terms(pred, aux_pred, target, cfg)?.total)
}

/// `½e^(−s_det)·l_det + ½s_det + ½e^(−s_seg)·l_seg + ½s_seg` with `s = log σ²`.
pub fn uncertainty_total(l_det: &Tensor, l_seg: &Tensor, s_det: &Tensor, s_seg: &Tensor) -> Result<Tensor> {
    let term = |l: &Tensor, s: &Tensor| -> Result<Tensor> {
        let s = s.flatten_all()?.sum_all()?;
        Ok(((s.neg()?.exp()?.mul(l)? + &s)? * 0.5)?)
    };
    Ok((term(l_det, s_det)? + term(l_seg, s_seg)?)?)
}

/// Learnable log-variances `s_det`, `s_seg`.
#[derive(Debug, Clone)]
pub struct UncertaintyWeights {
    pub log_var_det: Tensor,
    pub log_var_seg: Tensor,
}

impl UncertaintyWeights {
    pub fn new(b: &ParamBuilder, init_det: f64, init_seg: f64) -> Result<Self> {
        Ok(Self {
            log_var_det: b.param("log_var_det", 1, Init::Const(init_det))?,
            log_var_seg: b.param("log_var_seg", 1, Init::Const(init_seg))?,
        })
    }

    pub fn total(&self, l_det: &Tensor, l_seg: &Tensor) -> Result<Tensor> {
        uncertainty_total(l_det, l_seg, &self.log_var_det, &self.log_var_seg)
    }

    /// `(σ_det, σ_seg)`.
    pub fn sigmas(&self) -> Result<(f64, f64)> {
        let s = |t: &Tensor| -> Result<f64> {
            let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            v.first()
                .map(|s| (0.5 * s).exp())
                .ok_or_else(|| Error::Config("empty log-variance".into()))
        };
        Ok((s(&self.log_var_det)?, s(&self.log_var_seg)?))
    }
}
