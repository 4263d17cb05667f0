use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_bail, Error, Result};

/// Which head a single-task model keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskHead {
    #[default]
    Detection,
    Segmentation,
}

impl FromStr for TaskHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "det" | "detection" => Ok(TaskHead::Detection),
            "seg" | "segmentation" => Ok(TaskHead::Segmentation),
            other => Err(Error::Input(format!("unknown task head {other:?} (expected det|seg)"))),
        }
    }
}

/// Named size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Small enough to train end to end on a workstation CPU.
    Desk,
    /// Swin-Large schedule at 512×512.
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::Input(format!("unknown profile {other:?} (expected desk|full)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        })
    }
}

/// Architectural hyperparameters, including the ablation toggles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub stage_dims: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub stage_heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub fpn_channels: usize,
    pub cbam_reduction: usize,
    pub dropout_rate: f64,
    pub use_cbam: bool,
    pub use_fpn: bool,
    pub multitask: bool,
    /// Head kept when `multitask` is false.
    #[serde(default)]
    pub single_task: TaskHead,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            input_size: 512,
            patch_size: 4,
            stage_dims: vec![192, 384, 768, 1536],
            stage_depths: vec![2, 2, 18, 2],
            stage_heads: vec![6, 12, 24, 48],
            window_size: 7,
            mlp_ratio: 4,
            fpn_channels: 256,
            cbam_reduction: 16,
            dropout_rate: 0.3,
            use_cbam: true,
            use_fpn: true,
            multitask: true,
            single_task: TaskHead::Detection,
        }
    }

    pub fn desk() -> Self {
        Self {
            input_size: 64,
            patch_size: 4,
            stage_dims: vec![24, 48, 96, 192],
            stage_depths: vec![2, 2, 2, 2],
            stage_heads: vec![1, 2, 4, 8],
            window_size: 4,
            mlp_ratio: 4,
            fpn_channels: 64,
            cbam_reduction: 4,
            dropout_rate: 0.3,
            use_cbam: true,
            use_fpn: true,
            multitask: true,
            single_task: TaskHead::Detection,
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Full => Self::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_dims.len();
        if n != 4 || self.stage_depths.len() != 4 || self.stage_heads.len() != 4 {
            config_bail!(
                "stage_dims, stage_depths and stage_heads must all have 4 entries (got {}, {}, {})",
                n,
                self.stage_depths.len(),
                self.stage_heads.len()
            );
        }
        if self.patch_size == 0 || self.window_size == 0 || self.mlp_ratio == 0 {
            config_bail!("patch_size, window_size and mlp_ratio must be positive");
        }
        let stride = self.patch_size * 8;
        if self.input_size == 0 || self.input_size % stride != 0 {
            config_bail!(
                "input_size {} must be a positive multiple of patch_size x 8 = {}",
                self.input_size,
                stride
            );
        }
        for i in 0..3 {
            if self.stage_dims[i + 1] != 2 * self.stage_dims[i] {
                config_bail!("stage_dims must double per stage: {:?}", self.stage_dims);
            }
        }
        for (i, (&d, &h)) in self.stage_dims.iter().zip(&self.stage_heads).enumerate() {
            if h == 0 || d % h != 0 {
                config_bail!("stage {i}: dim {d} not divisible by {h} heads");
            }
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            config_bail!("every stage needs at least one block");
        }
        if self.fpn_channels == 0 {
            config_bail!("fpn_channels must be positive");
        }
        if self.uses_decoder() && self.use_cbam {
            if self.cbam_reduction == 0 || self.fpn_channels % self.cbam_reduction != 0 {
                config_bail!(
                    "fpn_channels {} not divisible by CBAM reduction {}",
                    self.fpn_channels,
                    self.cbam_reduction
                );
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            config_bail!("dropout_rate {} outside [0, 1)", self.dropout_rate);
        }
        Ok(())
    }

    pub fn has_detection_head(&self) -> bool {
        self.multitask || self.single_task == TaskHead::Detection
    }

    pub fn has_segmentation_head(&self) -> bool {
        self.multitask || self.single_task == TaskHead::Segmentation
    }

    /// FPN and decoder only exist to feed the segmentation head.
    pub fn uses_decoder(&self) -> bool {
        self.has_segmentation_head()
    }

    /// Token-grid side of backbone level `i`.
    pub fn level_side(&self, level: usize) -> usize {
        self.input_size / (self.patch_size << level)
    }

    /// Expected `(channels, side)` for each backbone level.
    pub fn backbone_shapes(&self) -> Vec<(usize, usize)> {
        (0..4).map(|i| (self.stage_dims[i], self.level_side(i))).collect()
    }

    /// Expected `(channels, side)` for each FPN level.
    pub fn pyramid_shapes(&self) -> Vec<(usize, usize)> {
        (0..4).map(|i| (self.fpn_channels, self.level_side(i))).collect()
    }

    /// Window size and shift actually used at a stage (the window shrinks to the grid when the
    /// grid is no larger than the window, and shifting is then disabled).
    pub fn stage_window(&self, level: usize) -> (usize, usize) {
        let side = self.level_side(level);
        if side <= self.window_size {
            (side, 0)
        } else {
            (self.window_size, self.window_size / 2)
        }
    }
}
