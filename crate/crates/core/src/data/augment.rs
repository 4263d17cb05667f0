//! Seeded augmentation. Geometric transforms are applied to image and mask alike; photometric
//! and compression transforms touch the image only.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::imageops;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use nalgebra::{SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::Batch;
use crate::error::{config_bail, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Chance of each photometric op (brightness, contrast, HSV shift, RGB shift).
    pub photometric_prob: f64,
    /// Relative brightness/contrast range, e.g. 0.3 for ±30%.
    pub brightness: f64,
    pub contrast: f64,
    pub hue_shift_deg: f64,
    pub saturation_shift: f64,
    pub value_shift: f64,
    /// Per-channel additive shift on the 8-bit scale.
    pub rgb_shift: f64,
    pub jpeg_prob: f64,
    pub jpeg_quality: (u8, u8),
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub noise_prob: f64,
    /// Gaussian noise std range on the 8-bit scale.
    pub noise_sigma: (f64, f64),
    pub hflip_prob: f64,
    pub rot90_prob: f64,
    pub elastic_prob: f64,
    /// Peak displacement as a fraction of the shorter side.
    pub elastic_alpha: f64,
    /// Smoothing of the displacement field as a fraction of the shorter side.
    pub elastic_sigma: f64,
    pub perspective_prob: f64,
    /// Corner jitter as a fraction of width/height.
    pub perspective_scale: f64,
    pub mixup_prob: f64,
    pub mixup_beta: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            photometric_prob: 0.5,
            brightness: 0.3,
            contrast: 0.3,
            hue_shift_deg: 15.0,
            saturation_shift: 0.2,
            value_shift: 0.1,
            rgb_shift: 15.0,
            jpeg_prob: 0.3,
            jpeg_quality: (60, 100),
            blur_prob: 0.3,
            blur_sigma: (0.3, 1.2),
            noise_prob: 0.3,
            noise_sigma: (5.0, 25.0),
            hflip_prob: 0.5,
            rot90_prob: 0.25,
            elastic_prob: 0.2,
            elastic_alpha: 0.02,
            elastic_sigma: 0.05,
            perspective_prob: 0.2,
            perspective_scale: 0.05,
            mixup_prob: 0.5,
            mixup_beta: 0.4,
        }
    }
}

impl AugmentConfig {
    /// Every transform and MixUp switched off.
    pub fn disabled() -> Self {
        Self {
            photometric_prob: 0.0,
            jpeg_prob: 0.0,
            blur_prob: 0.0,
            noise_prob: 0.0,
            hflip_prob: 0.0,
            rot90_prob: 0.0,
            elastic_prob: 0.0,
            perspective_prob: 0.0,
            mixup_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("photometric_prob", self.photometric_prob),
            ("jpeg_prob", self.jpeg_prob),
            ("blur_prob", self.blur_prob),
            ("noise_prob", self.noise_prob),
            ("hflip_prob", self.hflip_prob),
            ("rot90_prob", self.rot90_prob),
            ("elastic_prob", self.elastic_prob),
            ("perspective_prob", self.perspective_prob),
            ("mixup_prob", self.mixup_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                config_bail!("{name} = {p} is not a probability");
            }
        }
        let (lo, hi) = self.jpeg_quality;
        if lo < 60 || hi > 100 || lo > hi {
            config_bail!("jpeg_quality range ({lo}, {hi}) must lie within [60, 100]");
        }
        if !(self.mixup_beta > 0.0) {
            config_bail!("mixup_beta must be positive");
        }
        for (name, (a, b)) in [("blur_sigma", self.blur_sigma), ("noise_sigma", self.noise_sigma)] {
            if !(a >= 0.0 && a <= b) {
                config_bail!("{name} range ({a}, {b}) is invalid");
            }
        }
        Ok(())
    }
}

fn range(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn sample_rgb(img: &RgbImage, x: f64, y: f64) -> Rgb<u8> {
    let (w, h) = img.dimensions();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as u32, y.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let p = |xx, yy| img.get_pixel(xx, yy)[c] as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        *o = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(out)
}

fn sample_nearest(mask: &GrayImage, x: f64, y: f64) -> Luma<u8> {
    let (w, h) = mask.dimensions();
    let xi = x.round().clamp(0.0, (w - 1) as f64) as u32;
    let yi = y.round().clamp(0.0, (h - 1) as f64) as u32;
    *mask.get_pixel(xi, yi)
}

/// Resamples image (bilinear) and mask (nearest) through `src(x, y)`, which maps an output
/// pixel to its source coordinate. Out-of-range coordinates clamp to the edge.
fn warp(image: &RgbImage, mask: &GrayImage, src: impl Fn(f64, f64) -> (f64, f64)) -> (RgbImage, GrayImage) {
    let (w, h) = image.dimensions();
    let mut out_img = RgbImage::new(w, h);
    let mut out_mask = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src(x as f64, y as f64);
            out_img.put_pixel(x, y, sample_rgb(image, sx, sy));
            out_mask.put_pixel(x, y, sample_nearest(mask, sx, sy));
        }
    }
    (out_img, out_mask)
}

fn smooth_field(rng: &mut impl Rng, w: u32, h: u32, sigma: f32) -> Vec<f32> {
    let raw: Vec<f32> = (0..w * h).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let field: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(w, h, raw).expect("field size");
    let smoothed = imageops::blur(&field, sigma.max(0.5));
    let v = smoothed.into_raw();
    let peak = v.iter().fold(0f32, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        v.into_iter().map(|x| x / peak).collect()
    } else {
        v
    }
}

fn elastic(image: &RgbImage, mask: &GrayImage, cfg: &AugmentConfig, rng: &mut impl Rng) -> (RgbImage, GrayImage) {
    let (w, h) = image.dimensions();
    let side = w.min(h) as f64;
    let sigma = (cfg.elastic_sigma * side) as f32;
    let alpha = cfg.elastic_alpha * side;
    let dx = smooth_field(rng, w, h, sigma);
    let dy = smooth_field(rng, w, h, sigma);
    warp(image, mask, |x, y| {
        let i = y as usize * w as usize + x as usize;
        (x + alpha * dx[i] as f64, y + alpha * dy[i] as f64)
    })
}

/// Homography taking each `from[i]` to `to[i]`.
fn homography(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> Result<SMatrix<f64, 3, 3>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, (&(x, y), &(u, v))) in from.iter().zip(to).enumerate() {
        a.set_row(2 * i, &SMatrix::<f64, 1, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]));
        a.set_row(2 * i + 1, &SMatrix::<f64, 1, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]));
        b[2 * i] = u;
        b[2 * i + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Input("degenerate perspective corners".into()))?;
    Ok(SMatrix::<f64, 3, 3>::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

fn perspective(image: &RgbImage, mask: &GrayImage, cfg: &AugmentConfig, rng: &mut impl Rng) -> (RgbImage, GrayImage) {
    let (w, h) = image.dimensions();
    let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
    let src = [(0.0, 0.0), (wf, 0.0), (wf, hf), (0.0, hf)];
    let s = cfg.perspective_scale;
    let mut dst = src;
    for p in &mut dst {
        p.0 += range(rng, -s, s) * wf;
        p.1 += range(rng, -s, s) * hf;
    }
    let Ok(m) = homography(&dst, &src) else {
        return (image.clone(), mask.clone());
    };
    warp(image, mask, |x, y| {
        let q = m * nalgebra::Vector3::new(x, y, 1.0);
        (q[0] / q[2], q[1] / q[2])
    })
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn photometric(image: &mut RgbImage, cfg: &AugmentConfig, rng: &mut impl Rng) {
    let p = cfg.photometric_prob;
    let brightness = rng.random_bool(p).then(|| 1.0 + range(rng, -cfg.brightness, cfg.brightness));
    let contrast = rng.random_bool(p).then(|| 1.0 + range(rng, -cfg.contrast, cfg.contrast));
    let hsv = rng.random_bool(p).then(|| {
        (
            range(rng, -cfg.hue_shift_deg, cfg.hue_shift_deg),
            range(rng, -cfg.saturation_shift, cfg.saturation_shift),
            range(rng, -cfg.value_shift, cfg.value_shift),
        )
    });
    let shift = rng
        .random_bool(p)
        .then(|| [0; 3].map(|_: i32| range(rng, -cfg.rgb_shift, cfg.rgb_shift)));
    if brightness.is_none() && contrast.is_none() && hsv.is_none() && shift.is_none() {
        return;
    }
    let mut buf: Vec<f64> = image.as_raw().iter().map(|&v| v as f64).collect();
    if let Some(f) = brightness {
        buf.iter_mut().for_each(|v| *v *= f);
    }
    if let Some(c) = contrast {
        let mean = buf.iter().sum::<f64>() / buf.len() as f64;
        buf.iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
    }
    if let Some((dh, ds, dv)) = hsv {
        for px in buf.chunks_exact_mut(3) {
            let (h, s, v) = rgb_to_hsv(
                px[0].clamp(0.0, 255.0) / 255.0,
                px[1].clamp(0.0, 255.0) / 255.0,
                px[2].clamp(0.0, 255.0) / 255.0,
            );
            let (r, g, b) = hsv_to_rgb(h + dh, (s + ds).clamp(0.0, 1.0), (v + dv).clamp(0.0, 1.0));
            px.copy_from_slice(&[r * 255.0, g * 255.0, b * 255.0]);
        }
    }
    if let Some(sh) = shift {
        for px in buf.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] += sh[c];
            }
        }
    }
    for (dst, v) in image.iter_mut().zip(buf) {
        *dst = v.round().clamp(0.0, 255.0) as u8;
    }
}

fn compression(image: &mut RgbImage, cfg: &AugmentConfig, rng: &mut impl Rng) {
    if rng.random_bool(cfg.blur_prob) {
        let sigma = range(rng, cfg.blur_sigma.0, cfg.blur_sigma.1);
        if sigma > 0.0 {
            *image = imageops::blur(image, sigma as f32);
        }
    }
    if rng.random_bool(cfg.noise_prob) {
        let sigma = range(rng, cfg.noise_sigma.0, cfg.noise_sigma.1);
        if let Ok(normal) = Normal::new(0.0, sigma) {
            for v in image.iter_mut() {
                *v = (*v as f64 + normal.sample(rng)).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    if rng.random_bool(cfg.jpeg_prob) {
        let (lo, hi) = cfg.jpeg_quality;
        let q = rng.random_range(lo..=hi);
        let mut bytes = Vec::new();
        let encoded = JpegEncoder::new_with_quality(&mut Cursor::new(&mut bytes), q).encode_image(image);
        if encoded.is_ok() {
            if let Ok(decoded) = image::load_from_memory(&bytes) {
                *image = decoded.to_rgb8();
            }
        }
    }
}

/// Applies the configured transforms. Output depends only on the inputs, `cfg` and `seed`.
pub fn augment(image: &RgbImage, mask: &GrayImage, cfg: &AugmentConfig, seed: u64) -> (RgbImage, GrayImage) {
    debug_assert_eq!(image.dimensions(), mask.dimensions());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = image.clone();
    let mut m = mask.clone();

    if rng.random_bool(cfg.hflip_prob) {
        img = imageops::flip_horizontal(&img);
        m = imageops::flip_horizontal(&m);
    }
    if rng.random_bool(cfg.rot90_prob) {
        match rng.random_range(1..=3u8) {
            1 => {
                img = imageops::rotate90(&img);
                m = imageops::rotate90(&m);
            }
            2 => {
                img = imageops::rotate180(&img);
                m = imageops::rotate180(&m);
            }
            _ => {
                img = imageops::rotate270(&img);
                m = imageops::rotate270(&m);
            }
        }
    }
    if rng.random_bool(cfg.elastic_prob) {
        (img, m) = elastic(&img, &m, cfg, &mut rng);
    }
    if rng.random_bool(cfg.perspective_prob) {
        (img, m) = perspective(&img, &m, cfg, &mut rng);
    }
    photometric(&mut img, cfg, &mut rng);
    compression(&mut img, cfg, &mut rng);
    (img, m)
}

/// Draws `λ ~ Beta(β, β)`.
pub fn sample_mixup_lambda(rng: &mut impl Rng, beta: f64) -> Result<f64> {
    let dist = Beta::new(beta, beta).map_err(|e| Error::Config(format!("mixup beta: {e}")))?;
    Ok(dist.sample(rng))
}

/// `λ·a + (1−λ)·b` over images, labels and masks.
pub fn mixup_with_lambda(a: &Batch, b: &Batch, lambda: f64) -> Result<Batch> {
    if a.images.dims() != b.images.dims() || a.masks.dims() != b.masks.dims() {
        return Err(Error::Input("mixup batches differ in shape".into()));
    }
    if lambda == 1.0 {
        return Ok(a.clone());
    }
    let mix = |x: &candle_core::Tensor, y: &candle_core::Tensor| -> Result<candle_core::Tensor> {
        Ok(((x * lambda)? + (y * (1.0 - lambda))?)?)
    };
    Ok(Batch {
        images: mix(&a.images, &b.images)?,
        labels: mix(&a.labels, &b.labels)?,
        masks: mix(&a.masks, &b.masks)?,
        indices: a.indices.clone(),
    })
}

/// With probability `mixup_prob` mixes the batches with a Beta-distributed λ (returned);
/// otherwise returns `a` unchanged.
pub fn mixup(a: &Batch, b: &Batch, cfg: &AugmentConfig, seed: u64) -> Result<(Batch, Option<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if !rng.random_bool(cfg.mixup_prob) {
        return Ok((a.clone(), None));
    }
    let lambda = sample_mixup_lambda(&mut rng, cfg.mixup_beta)?;
    Ok((mixup_with_lambda(a, b, lambda)?, Some(lambda)))
}
