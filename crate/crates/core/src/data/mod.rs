//! Manifests, preprocessing, augmentation and the synthetic document generator.

pub mod augment;
pub mod dataset;
pub mod preprocess;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use augment::{augment, mixup, mixup_with_lambda, sample_mixup_lambda, AugmentConfig};
pub use dataset::{Batch, Dataset};
pub use preprocess::{decode_image, preprocess, preprocess_mask, IMAGENET_MEAN, IMAGENET_STD};
pub use synth::{generate_synthetic_dataset, render_sample, RenderedSample, SynthKind, DEVICES, LANGUAGES};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    BonaFide = 0,
    Attack = 1,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn is_attack(self) -> bool {
        self == Label::Attack
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::BonaFide => "bona_fide",
            Label::Attack => "attack",
        })
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(*self as u8)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(0) => Ok(Label::BonaFide),
            Raw::Int(1) => Ok(Label::Attack),
            Raw::Str(s) if s == "bona_fide" => Ok(Label::BonaFide),
            Raw::Str(s) if s == "attack" => Ok(Label::Attack),
            Raw::Int(v) => Err(serde::de::Error::custom(format!("label must be 0 or 1, got {v}"))),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("unknown label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackType {
    #[serde(rename = "digital_1")]
    Digital1,
    #[serde(rename = "digital_2")]
    Digital2,
    SyntheticFaceswap,
    SyntheticInpaint,
}

pub const DEVICE_TAGS: [&str; 4] = ["huawei", "iphone", "scanner", "synthetic"];

/// One manifest record. Paths are resolved against the manifest directory on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSample {
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    pub label: Label,
    pub language: String,
    pub device: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_type: Option<AttackType>,
}

impl ImageSample {
    fn check(&self) -> std::result::Result<(), String> {
        match (self.label, &self.mask_path) {
            (Label::Attack, None) => return Err("attack record has no mask_path".into()),
            (Label::BonaFide, Some(_)) => return Err("bona fide record must not have a mask_path".into()),
            _ => {}
        }
        if self.label == Label::BonaFide && self.attack_type.is_some() {
            return Err("bona fide record must not have an attack_type".into());
        }
        if !DEVICE_TAGS.contains(&self.device.as_str()) {
            return Err(format!("unknown device tag {:?} (expected one of {DEVICE_TAGS:?})", self.device));
        }
        if self.language.is_empty() {
            return Err("empty language tag".into());
        }
        Ok(())
    }

    /// Value of a grouping key (`language` or `device`).
    pub fn group_value(&self, key: &str) -> Result<&str> {
        match key {
            "language" => Ok(&self.language),
            "device" => Ok(&self.device),
            other => Err(Error::Input(format!("unknown group key {other:?} (expected language|device)"))),
        }
    }
}

/// Reads a line-delimited JSON manifest. Blank lines are skipped; relative paths are taken
/// relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ImageSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let invalid = |message: String| Error::Validation {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let mut sample: ImageSample = serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
        sample.check().map_err(|m| invalid(format!("{m}: {}", sample.image_path.display())))?;
        sample.image_path = base.join(&sample.image_path);
        sample.mask_path = sample.mask_path.map(|p| base.join(p));
        samples.push(sample);
    }
    Ok(samples)
}

/// Writes samples as a manifest; paths under the manifest directory are stored relative to it.
pub fn write_manifest(path: &Path, samples: &[ImageSample]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
    let mut out = Vec::new();
    for s in samples {
        let mut s = s.clone();
        s.image_path = rel(&s.image_path);
        s.mask_path = s.mask_path.as_deref().map(rel);
        serde_json::to_writer(&mut out, &s)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ManifestStats {
    pub total: usize,
    pub by_label: BTreeMap<u8, usize>,
    pub by_language: BTreeMap<String, usize>,
    pub by_device: BTreeMap<String, usize>,
}

pub fn manifest_stats(samples: &[ImageSample]) -> ManifestStats {
    let mut stats = ManifestStats {
        total: samples.len(),
        ..Default::default()
    };
    for s in samples {
        *stats.by_label.entry(s.label as u8).or_default() += 1;
        *stats.by_language.entry(s.language.clone()).or_default() += 1;
        *stats.by_device.entry(s.device.clone()).or_default() += 1;
    }
    stats
}
