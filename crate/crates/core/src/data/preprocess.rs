use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Mask values above this are foreground.
pub const MASK_THRESHOLD: u8 = 127;

/// Decodes PNG or JPEG bytes to 8-bit RGB.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.is_empty() {
        return Err(Error::Input("empty image".into()));
    }
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Input(format!("cannot decode image: {e}")))
}

/// Bilinear resize to `size × size`, scale to `[0, 1]`, per-channel ImageNet normalization.
/// Returns channel-major `3 × size × size` values.
pub fn preprocess(image: &RgbImage, size: usize) -> Vec<f32> {
    let s = size as u32;
    let resized;
    let img = if image.dimensions() == (s, s) {
        image
    } else {
        resized = imageops::resize(image, s, s, FilterType::Triangle);
        &resized
    };
    let plane = size * size;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = (px[c] as f32 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
    out
}

/// Inverse of the normalization step: channel-major values back to `[0, 1]`.
pub fn denormalize(values: &[f32]) -> Vec<f32> {
    let plane = values.len() / 3;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = i / plane;
            v * IMAGENET_STD[c] + IMAGENET_MEAN[c]
        })
        .collect()
}

/// Nearest-neighbour resize to `size × size`, then binarize to `{0, 1}`.
pub fn preprocess_mask(mask: &GrayImage, size: usize) -> Vec<f32> {
    let s = size as u32;
    let resized;
    let m = if mask.dimensions() == (s, s) {
        mask
    } else {
        resized = imageops::resize(mask, s, s, FilterType::Nearest);
        &resized
    };
    m.pixels().map(|p| if p[0] > MASK_THRESHOLD { 1.0 } else { 0.0 }).collect()
}
