use candle_core::{DType, Device, Tensor};
use image::{GrayImage, RgbImage};
use rayon::prelude::*;

use super::augment::{augment, AugmentConfig};
use super::preprocess::{preprocess, preprocess_mask};
use super::{ImageSample, Label};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Model-ready tensors for a set of samples.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, 3, S, S)`, normalized.
    pub images: Tensor,
    /// `(B,)` in `[0, 1]`.
    pub labels: Tensor,
    /// `(B, 1, S, S)` in `[0, 1]`.
    pub masks: Tensor,
    /// Dataset indices of the rows.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Decoded samples held in memory at their original resolution.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<ImageSample>,
    images: Vec<RgbImage>,
    masks: Vec<GrayImage>,
    input_size: usize,
    dtype: DType,
}

fn load_one(s: &ImageSample) -> Result<(RgbImage, GrayImage)> {
    let image = image::open(&s.image_path)
        .map_err(|e| Error::Input(format!("{}: {e}", s.image_path.display())))?
        .to_rgb8();
    let mask = match &s.mask_path {
        Some(p) => {
            let m = image::open(p).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?.to_luma8();
            if m.dimensions() != image.dimensions() {
                return Err(Error::Input(format!(
                    "{}: mask is {:?} but image is {:?}",
                    p.display(),
                    m.dimensions(),
                    image.dimensions()
                )));
            }
            m
        }
        None => GrayImage::new(image.width(), image.height()),
    };
    Ok((image, mask))
}

impl Dataset {
    /// Decodes every image and mask (in parallel).
    pub fn load(samples: Vec<ImageSample>, input_size: usize, dtype: DType) -> Result<Self> {
        let decoded: Vec<(RgbImage, GrayImage)> = samples.par_iter().map(load_one).collect::<Result<_>>()?;
        let (images, masks) = decoded.into_iter().unzip();
        Ok(Self {
            samples,
            images,
            masks,
            input_size,
            dtype,
        })
    }

    /// Builds a dataset from already-decoded images; masks default to empty.
    pub fn from_images(
        samples: Vec<ImageSample>,
        images: Vec<RgbImage>,
        masks: Vec<Option<GrayImage>>,
        input_size: usize,
        dtype: DType,
    ) -> Result<Self> {
        if samples.len() != images.len() || images.len() != masks.len() {
            return Err(Error::Input("samples, images and masks differ in length".into()));
        }
        let masks = images
            .iter()
            .zip(masks)
            .map(|(img, m)| m.unwrap_or_else(|| GrayImage::new(img.width(), img.height())))
            .collect();
        Ok(Self {
            samples,
            images,
            masks,
            input_size,
            dtype,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn image(&self, i: usize) -> &RgbImage {
        &self.images[i]
    }

    pub fn mask(&self, i: usize) -> &GrayImage {
        &self.masks[i]
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label as u8).collect()
    }

    pub fn is_attack(&self, i: usize) -> bool {
        self.samples[i].label == Label::Attack
    }

    /// Assembles a batch. With `augment`, sample `i` is augmented with a seed derived from
    /// `(seed, i)`, so the result does not depend on batch composition or thread count.
    pub fn batch(&self, indices: &[usize], augment_with: Option<(&AugmentConfig, u64)>) -> Result<Batch> {
        let s = self.input_size;
        let rows: Vec<(Vec<f32>, Vec<f32>)> = indices
            .par_iter()
            .map(|&i| {
                let (img, mask) = (&self.images[i], &self.masks[i]);
                match augment_with {
                    Some((cfg, seed)) => {
                        let (a, m) = augment(img, mask, cfg, derive_seed(seed, 0xa06, i as u64));
                        (preprocess(&a, s), preprocess_mask(&m, s))
                    }
                    None => (preprocess(img, s), preprocess_mask(mask, s)),
                }
            })
            .collect();
        let b = indices.len();
        let mut images = Vec::with_capacity(b * 3 * s * s);
        let mut masks = Vec::with_capacity(b * s * s);
        for (img, m) in rows {
            images.extend_from_slice(&img);
            masks.extend_from_slice(&m);
        }
        let labels: Vec<f32> = indices.iter().map(|&i| self.samples[i].label.as_f64() as f32).collect();
        let dev = Device::Cpu;
        Ok(Batch {
            images: Tensor::from_vec(images, (b, 3, s, s), &dev)?.to_dtype(self.dtype)?,
            labels: Tensor::from_vec(labels, b, &dev)?.to_dtype(self.dtype)?,
            masks: Tensor::from_vec(masks, (b, 1, s, s), &dev)?.to_dtype(self.dtype)?,
            indices: indices.to_vec(),
        })
    }
}
