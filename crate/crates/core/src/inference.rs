//! Evaluation-mode prediction on decoded images.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor};
use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, RgbImage};

use crate::data::{preprocess, Dataset};
use crate::error::Result;
use crate::evaluation::EvalRecord;
use crate::model::checkpoint::CheckpointMeta;
use crate::model::{Mode, ModelState, TwoHeadSwinFpn};

/// Prediction for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub score: Option<f64>,
    /// Row-major probabilities at model resolution.
    pub mask: Option<Vec<f32>>,
}

/// Shares weights with a [`ModelState`] and runs graph-free forward passes. Safe to call from
/// several threads at once.
pub struct Predictor {
    state: ModelState,
    net: TwoHeadSwinFpn,
    meta: CheckpointMeta,
    forwards: AtomicUsize,
}

impl std::fmt::Debug for Predictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Predictor").field("meta", &self.meta).finish()
    }
}

impl Predictor {
    pub fn new(state: ModelState, meta: CheckpointMeta) -> Result<Self> {
        let net = state.inference_network()?;
        Ok(Self {
            state,
            net,
            meta,
            forwards: AtomicUsize::new(0),
        })
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let (state, meta) = ModelState::load(path, DType::F32)?;
        Self::new(state, meta)
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn meta(&self) -> &CheckpointMeta {
        &self.meta
    }

    pub fn input_size(&self) -> usize {
        self.state.config().input_size
    }

    /// Number of network forward passes run so far.
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::SeqCst)
    }

    /// One forward pass over a normalized `(B, 3, S, S)` batch.
    pub fn predict_tensor(&self, images: &Tensor) -> Result<Vec<Prediction>> {
        self.forwards.fetch_add(1, Ordering::SeqCst);
        predict_with(&self.net, self.state.store().dtype(), images)
    }

    pub fn predict_images(&self, images: &[RgbImage]) -> Result<Vec<Prediction>> {
        let s = self.input_size();
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            data.extend(preprocess(img, s));
        }
        let t = Tensor::from_vec(data, (images.len(), 3, s, s), &Device::Cpu)?;
        self.predict_tensor(&t)
    }

    pub fn predict_image(&self, image: &RgbImage) -> Result<Prediction> {
        Ok(self.predict_images(std::slice::from_ref(image))?.remove(0))
    }

    /// Predictions for every dataset sample, with ground truth at model resolution.
    pub fn evaluate_dataset(&self, ds: &Dataset, batch_size: usize) -> Result<Vec<EvalRecord>> {
        evaluate_with(ds, batch_size, |images| self.predict_tensor(images))
    }
}

/// Evaluation-mode forward pass of `net` on a normalized batch.
pub fn predict_with(net: &TwoHeadSwinFpn, dtype: DType, images: &Tensor) -> Result<Vec<Prediction>> {
    let out = net.forward(&images.to_dtype(dtype)?, Mode::Eval)?;
    let b = images.dim(0)?;
    let scores: Option<Vec<f64>> = match &out.score {
        Some(s) => Some(s.to_dtype(DType::F64)?.to_vec1::<f64>()?),
        None => None,
    };
    let masks: Option<Vec<Vec<f32>>> = match &out.mask {
        Some(m) => Some(m.to_dtype(DType::F32)?.flatten_from(1)?.to_vec2::<f32>()?),
        None => None,
    };
    Ok((0..b)
        .map(|i| Prediction {
            score: scores.as_ref().map(|s| s[i]),
            mask: masks.as_ref().map(|m| m[i].clone()),
        })
        .collect())
}

/// Runs `predict` over the dataset in order and pairs each prediction with its ground truth.
pub fn evaluate_with(
    ds: &Dataset,
    batch_size: usize,
    mut predict: impl FnMut(&Tensor) -> Result<Vec<Prediction>>,
) -> Result<Vec<EvalRecord>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = ds.batch(chunk, None)?;
        let gts = batch.masks.flatten_from(1)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        for (p, gt) in predict(&batch.images)?.into_iter().zip(gts) {
            out.push(EvalRecord {
                score: p.score,
                pred_mask: p.mask,
                gt_mask: gt,
            });
        }
    }
    Ok(out)
}

/// Bilinear resize of a square `size × size` probability map to `width × height`.
pub fn resize_mask(mask: &[f32], size: usize, width: u32, height: u32) -> Vec<f32> {
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(size as u32, size as u32, mask.to_vec()).expect("mask length is size²");
    imageops::resize(&buf, width, height, FilterType::Triangle).into_raw()
}
