//! Fantasy ID-card generator with face-swap and inpainting proxies.
//!
//! Cards carry a fine stripe texture over their whole surface; the portrait is blended
//! semi-transparently so the texture shows through. Both attack kinds destroy the texture
//! inside a rectangle aligned to a 16×16 card grid: a face swap pastes the portrait region
//! of a donor card with shifted exposure, an inpaint fills one text line with a lighter flat
//! color and re-renders different glyphs onto it.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{imageops, GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{write_manifest, AttackType, ImageSample, Label};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const LANGUAGES: [&str; 10] = [
    "russian",
    "ukrainian",
    "persian",
    "hindi",
    "arabic",
    "french",
    "english",
    "portuguese",
    "chinese",
    "turkish",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Jpeg(u8),
    Png,
}

#[derive(Debug, Clone, Copy)]
pub struct DeviceProfile {
    pub name: &'static str,
    pub width: u32,
    pub height: u32,
    pub encoding: Encoding,
    /// Additive RGB tint.
    tint: [i16; 3],
    /// Amplitude of fixed per-pixel sensor noise.
    noise: u8,
}

pub const DEVICES: [DeviceProfile; 3] = [
    DeviceProfile {
        name: "huawei",
        width: 416,
        height: 256,
        encoding: Encoding::Jpeg(85),
        tint: [8, 2, -6],
        noise: 0,
    },
    DeviceProfile {
        name: "iphone",
        width: 384,
        height: 240,
        encoding: Encoding::Jpeg(92),
        tint: [-4, 0, 8],
        noise: 0,
    },
    DeviceProfile {
        name: "scanner",
        width: 352,
        height: 224,
        encoding: Encoding::Png,
        tint: [0, 0, 0],
        noise: 3,
    },
];

const GRID: u32 = 16;
const GLYPHS_PER_SCRIPT: usize = 24;
const TEXT_ROWS: [u32; 4] = [3, 6, 9, 12];
const TEXT_COL: u32 = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SynthKind {
    BonaFide,
    FaceSwap,
    Inpaint,
}

impl SynthKind {
    pub const ALL: [SynthKind; 3] = [SynthKind::BonaFide, SynthKind::FaceSwap, SynthKind::Inpaint];

    fn tag(self) -> &'static str {
        match self {
            SynthKind::BonaFide => "bona",
            SynthKind::FaceSwap => "swap",
            SynthKind::Inpaint => "inpaint",
        }
    }
}

/// A render before and after manipulation. `mask` is 255 exactly where the two differ.
#[derive(Debug, Clone)]
pub struct RenderedSample {
    pub original: RgbImage,
    pub image: RgbImage,
    pub mask: Option<GrayImage>,
}

/// Cell-aligned rectangle `[c0, c1) × [r0, r1)`.
#[derive(Debug, Clone, Copy)]
struct CellRect {
    c0: u32,
    r0: u32,
    c1: u32,
    r1: u32,
}

struct Layout {
    portrait: CellRect,
    lines: Vec<CellRect>,
}

struct Canvas {
    w: u32,
    h: u32,
    cw: u32,
    ch: u32,
}

impl Canvas {
    fn px(&self, r: CellRect) -> (u32, u32, u32, u32) {
        (r.c0 * self.cw, r.r0 * self.ch, r.c1 * self.cw, r.r1 * self.ch)
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
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
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn to_px(c: [f64; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8))
}

fn glyph_table(language: usize) -> Vec<[u8; 7]> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_6170 ^ language as u64);
    (0..GLYPHS_PER_SCRIPT)
        .map(|_| {
            let mut g = [0u8; 7];
            for row in &mut g {
                for bit in 0..5 {
                    if rng.random_bool(0.45) {
                        *row |= 1 << bit;
                    }
                }
            }
            g
        })
        .collect()
}

fn draw_glyphs(img: &mut RgbImage, cv: &Canvas, line: CellRect, glyphs: &[[u8; 7]], rng: &mut impl Rng, ink: Rgb<u8>) {
    let (x0, y0, x1, y1) = cv.px(line);
    let gw = cv.cw;
    let bit_w = (gw / 6).max(1);
    let bit_h = ((y1 - y0) / 9).max(1);
    let mut x = x0;
    while x + gw <= x1 {
        let g = glyphs[rng.random_range(0..glyphs.len())];
        for (row, bits) in g.iter().enumerate() {
            for bit in 0..5u32 {
                if bits & (1 << bit) == 0 {
                    continue;
                }
                let bx = x + bit * bit_w;
                let by = y0 + bit_h + row as u32 * bit_h;
                for yy in by..(by + bit_h).min(y1) {
                    for xx in bx..(bx + bit_w).min(x1) {
                        img.put_pixel(xx, yy, ink);
                    }
                }
            }
        }
        x += gw;
    }
}

/// Renders a bona fide card; the layout is drawn from `rng`.
fn render_card(rng: &mut ChaCha8Rng, language: usize, cv: &Canvas) -> (RgbImage, Layout, [f64; 3]) {
    let hue = language as f64 * 36.0 + rng.random_range(-8.0..8.0);
    let base = hsv(hue, rng.random_range(0.15..0.3), rng.random_range(0.8..0.9));
    let header = hsv(hue + 180.0, 0.35, 0.55);
    let amp = rng.random_range(22.0..32.0);
    let period = cv.cw;
    let phase = rng.random_range(0..period);
    let mut img = RgbImage::from_fn(cv.w, cv.h, |x, y| {
        let c = if y < 2 * cv.ch { header } else { base };
        let s = if (x + phase) % period < period / 2 { amp } else { -amp };
        to_px(c.map(|v| v + s))
    });

    let c0 = 1;
    let r0 = rng.random_range(3..=4);
    let portrait = CellRect {
        c0,
        r0,
        c1: c0 + rng.random_range(6..=7),
        r1: r0 + rng.random_range(11..=12).min(GRID - r0),
    };
    let skin = hsv(rng.random_range(15.0..40.0), rng.random_range(0.3..0.6), rng.random_range(0.35..0.75));
    let (px0, py0, px1, py1) = cv.px(portrait);
    let (cx, cy) = ((px0 + px1) as f64 / 2.0, (py0 + py1) as f64 / 2.0);
    let (rx, ry) = ((px1 - px0) as f64 * 0.42, (py1 - py0) as f64 * 0.45);
    for y in py0..py1 {
        for x in px0..px1 {
            let d = ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2);
            let (col, a) = if d <= 1.0 { (skin, 0.55) } else { ([225.0; 3], 0.3) };
            let p = img.get_pixel(x, y).0;
            img.put_pixel(x, y, to_px([0, 1, 2].map(|c| p[c] as f64 * (1.0 - a) + col[c] * a)));
        }
    }

    let glyphs = glyph_table(language);
    let ink = to_px(hsv(hue + 200.0, 0.4, 0.2));
    let lines: Vec<CellRect> = TEXT_ROWS
        .iter()
        .map(|&r| CellRect {
            c0: TEXT_COL,
            r0: r,
            c1: TEXT_COL + rng.random_range(5..=7),
            r1: r + 3,
        })
        .collect();
    for &line in &lines {
        draw_glyphs(&mut img, cv, line, &glyphs, rng, ink);
    }
    (img, Layout { portrait, lines }, base)
}

fn apply_device(img: &mut RgbImage, dev: &DeviceProfile, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for px in img.pixels_mut() {
        let n = if dev.noise > 0 {
            rng.random_range(-(dev.noise as i16)..=dev.noise as i16)
        } else {
            0
        };
        for c in 0..3 {
            px[c] = (px[c] as i16 + dev.tint[c] + n).clamp(0, 255) as u8;
        }
    }
}

/// Renders one sample deterministically from `seed`.
pub fn render_sample(seed: u64, language: usize, device: usize, kind: SynthKind) -> RenderedSample {
    let dev = &DEVICES[device % DEVICES.len()];
    let cv = Canvas {
        w: dev.width,
        h: dev.height,
        cw: dev.width / GRID,
        ch: dev.height / GRID,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (card, layout, base) = render_card(&mut rng, language, &cv);
    let noise_seed: u64 = rng.random();

    let mut original = card.clone();
    apply_device(&mut original, dev, noise_seed);
    if kind == SynthKind::BonaFide {
        return RenderedSample {
            image: original.clone(),
            original,
            mask: None,
        };
    }

    let mut tampered = card;
    let region = match kind {
        SynthKind::FaceSwap => {
            let mut donor_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let (donor, donor_layout, _) = render_card(&mut donor_rng, language, &cv);
            let (x0, y0, x1, y1) = cv.px(layout.portrait);
            let (dx0, dy0, _, _) = cv.px(donor_layout.portrait);
            let (w, h) = (x1 - x0, y1 - y0);
            let mut patch = imageops::crop_imm(&donor, dx0.min(cv.w - w), dy0.min(cv.h - h), w, h).to_image();
            // The donor photo was captured under different exposure.
            let gain = rng.random_range(40.0..60.0);
            for p in patch.pixels_mut() {
                *p = to_px(p.0.map(|v| v as f64 + gain));
            }
            imageops::replace(&mut tampered, &patch, x0 as i64, y0 as i64);
            layout.portrait
        }
        SynthKind::Inpaint => {
            let line = layout.lines[rng.random_range(0..layout.lines.len())];
            let (x0, y0, x1, y1) = cv.px(line);
            let fill = to_px(base.map(|v| v + 45.0));
            for y in y0..y1 {
                for x in x0..x1 {
                    tampered.put_pixel(x, y, fill);
                }
            }
            let glyphs = glyph_table(language);
            let ink = to_px([20.0; 3]);
            draw_glyphs(&mut tampered, &cv, line, &glyphs, &mut rng, ink);
            line
        }
        SynthKind::BonaFide => unreachable!(),
    };
    apply_device(&mut tampered, dev, noise_seed);

    // Make the altered region exactly the set of differing pixels.
    let (x0, y0, x1, y1) = cv.px(region);
    for y in y0..y1 {
        for x in x0..x1 {
            let p = tampered.get_pixel_mut(x, y);
            if p.0 == original.get_pixel(x, y).0 {
                p[0] = if p[0] < 255 { p[0] + 1 } else { p[0] - 1 };
            }
        }
    }
    let mask = GrayImage::from_fn(cv.w, cv.h, |x, y| {
        Luma([if original.get_pixel(x, y) != tampered.get_pixel(x, y) { 255 } else { 0 }])
    });
    RenderedSample {
        original,
        image: tampered,
        mask: Some(mask),
    }
}

fn encode(img: &RgbImage, enc: Encoding) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    match enc {
        Encoding::Jpeg(q) => JpegEncoder::new_with_quality(&mut Cursor::new(&mut bytes), q).encode_image(img)?,
        Encoding::Png => img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)?,
    }
    Ok(bytes)
}

/// Cell of the `i`-th record: every (language, device) pair appears once per 30 records and
/// kinds advance every 30 records.
pub fn cell_of(i: usize) -> (usize, usize, SynthKind) {
    let combo = i % 30;
    (combo % LANGUAGES.len(), combo % DEVICES.len(), SynthKind::ALL[(i / 30) % 3])
}

/// Writes `n_per_cell` samples for every (language, device, kind) cell plus `manifest.jsonl`
/// into `out_dir`; returns the manifest path.
pub fn generate_synthetic_dataset(out_dir: &Path, n_per_cell: usize, seed: u64) -> Result<PathBuf> {
    let img_dir = out_dir.join("images");
    let mask_dir = out_dir.join("masks");
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let total = n_per_cell * LANGUAGES.len() * DEVICES.len() * SynthKind::ALL.len();
    let samples: Vec<ImageSample> = (0..total)
        .into_par_iter()
        .map(|i| {
            let (lang, dev, kind) = cell_of(i);
            let r = render_sample(derive_seed(seed, 0x5717, i as u64), lang, dev, kind);
            let profile = &DEVICES[dev];
            let ext = if profile.encoding == Encoding::Png { "png" } else { "jpg" };
            let stem = format!("{i:05}_{}_{}_{}", LANGUAGES[lang], profile.name, kind.tag());
            let image_path = img_dir.join(format!("{stem}.{ext}"));
            fs::write(&image_path, encode(&r.image, profile.encoding)?).map_err(|e| Error::io(&image_path, e))?;
            let mask_path = match &r.mask {
                Some(mask) => {
                    let p = mask_dir.join(format!("{stem}.png"));
                    mask.save_with_format(&p, ImageFormat::Png)?;
                    Some(p)
                }
                None => None,
            };
            Ok(ImageSample {
                image_path,
                mask_path,
                label: if kind == SynthKind::BonaFide { Label::BonaFide } else { Label::Attack },
                language: LANGUAGES[lang].to_string(),
                device: profile.name.to_string(),
                attack_type: match kind {
                    SynthKind::BonaFide => None,
                    SynthKind::FaceSwap => Some(AttackType::SyntheticFaceswap),
                    SynthKind::Inpaint => Some(AttackType::SyntheticInpaint),
                },
            })
        })
        .collect::<Result<_>>()?;
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &samples)?;
    Ok(manifest)
}
