//! Hierarchical windowed-attention backbone.
//!
//! Tokens are kept channels-last `(B, H, W, C)` inside the stages; each level's output is
//! layer-normed and returned channels-first `(B, C, H, W)`. Grids that the window does not tile
//! are zero-padded on the bottom/right, and the padded tokens are masked out of attention.

use candle_core::{DType, Tensor};

use super::config::ModelConfig;
use super::FeaturePyramid;
use crate::error::{config_bail, Result};
use crate::nn::{layers::constant, ops, Conv2d, Init, LayerNorm, Linear, ParamBuilder};

const MASK_NEG: f64 = -100.0;

#[derive(Debug, Clone)]
struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    bias_table: Tensor,
    bias_index: Tensor,
    heads: usize,
    scale: f64,
}

impl WindowAttention {
    fn new(b: &ParamBuilder, dim: usize, heads: usize, window: usize) -> Result<Self> {
        let init = Init::TruncNormal { std: 0.02 };
        let span = 2 * window - 1;
        let bias_table = b.param("relative_position_bias_table", (span * span, heads), init)?;
        let n = window * window;
        let mut index = Vec::with_capacity(n * n);
        for i in 0..n {
            let (yi, xi) = (i / window, i % window);
            for j in 0..n {
                let (yj, xj) = (j / window, j % window);
                let dy = yi + window - 1 - yj;
                let dx = xi + window - 1 - xj;
                index.push((dy * span + dx) as u32);
            }
        }
        let bias_index = Tensor::from_vec(index, n * n, &candle_core::Device::Cpu)?;
        Ok(Self {
            qkv: Linear::new(&b.pp("qkv"), dim, 3 * dim, true, init)?,
            proj: Linear::new(&b.pp("proj"), dim, dim, true, init)?,
            bias_table,
            bias_index,
            heads,
            scale: ((dim / heads) as f64).powf(-0.5),
        })
    }

    /// `windows` is `(B·nW, N, C)`; `mask` is `(nW, N, N)` additive.
    fn forward(&self, windows: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (bw, n, c) = windows.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(windows)?
            .reshape((bw, n, 3, self.heads, hd))?
            .permute([2, 0, 3, 1, 4])?
            .contiguous()?;
        let q = (qkv.get(0)? * self.scale)?;
        let k = qkv.get(1)?;
        let v = qkv.get(2)?;
        let mut attn = q.matmul(&k.t()?)?;
        let bias = self
            .bias_table
            .index_select(&self.bias_index, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?;
        attn = attn.broadcast_add(&bias.unsqueeze(0)?)?;
        if let Some(mask) = mask {
            let nw = mask.dim(0)?;
            attn = attn
                .reshape((bw / nw, nw, self.heads, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((bw, self.heads, n, n))?;
        }
        let attn = ops::softmax_last_dim(&attn)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((bw, n, c))?;
        self.proj.forward(&out)
    }
}

/// Region label of every token of a padded, cyclically shifted grid. Tokens only attend to
/// tokens with the same label: the label separates the shifted-window slices and separates
/// padding from real tokens.
fn region_labels(h: usize, w: usize, hp: usize, wp: usize, window: usize, shift: usize) -> Vec<usize> {
    let slice = |pos: usize, len: usize| -> usize {
        if shift == 0 || pos < len - window {
            0
        } else if pos < len - shift {
            1
        } else {
            2
        }
    };
    let mut labels = Vec::with_capacity(hp * wp);
    for y in 0..hp {
        for x in 0..wp {
            let (oy, ox) = ((y + shift) % hp, (x + shift) % wp);
            let padded = (oy >= h || ox >= w) as usize;
            labels.push((slice(y, hp) * 3 + slice(x, wp)) * 2 + padded);
        }
    }
    labels
}

fn attention_mask(
    h: usize,
    w: usize,
    window: usize,
    shift: usize,
    dtype: DType,
) -> Result<Option<Tensor>> {
    let hp = h.div_ceil(window) * window;
    let wp = w.div_ceil(window) * window;
    if shift == 0 && hp == h && wp == w {
        return Ok(None);
    }
    let labels = region_labels(h, w, hp, wp, window, shift);
    let (nh, nw) = (hp / window, wp / window);
    let n = window * window;
    let mut mask = Vec::with_capacity(nh * nw * n * n);
    for wy in 0..nh {
        for wx in 0..nw {
            let tok = |i: usize| labels[(wy * window + i / window) * wp + wx * window + i % window];
            for i in 0..n {
                for j in 0..n {
                    mask.push(if tok(i) == tok(j) { 0.0 } else { MASK_NEG });
                }
            }
        }
    }
    Ok(Some(constant(mask, (nh * nw, n, n), dtype)?))
}

fn window_partition(x: &Tensor, window: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape(vec![b, h / window, window, w / window, window, c])?
        .permute([0, 1, 3, 2, 4, 5])?
        .contiguous()?
        .reshape((b * (h / window) * (w / window), window * window, c))?)
}

fn window_merge(windows: &Tensor, window: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = windows.dim(2)?;
    Ok(windows
        .reshape(vec![b, h / window, w / window, window, window, c])?
        .permute([0, 1, 3, 2, 4, 5])?
        .contiguous()?
        .reshape((b, h, w, c))?)
}

#[derive(Debug, Clone)]
struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    window: usize,
    shift: usize,
    mask: Option<Tensor>,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        b: &ParamBuilder,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        side: usize,
        window: usize,
        shift: usize,
    ) -> Result<Self> {
        let init = Init::TruncNormal { std: 0.02 };
        Ok(Self {
            norm1: LayerNorm::new(&b.pp("norm1"), dim)?,
            attn: WindowAttention::new(&b.pp("attn"), dim, heads, window)?,
            norm2: LayerNorm::new(&b.pp("norm2"), dim)?,
            fc1: Linear::new(&b.pp("mlp.fc1"), dim, dim * mlp_ratio, true, init)?,
            fc2: Linear::new(&b.pp("mlp.fc2"), dim * mlp_ratio, dim, true, init)?,
            window,
            shift,
            mask: attention_mask(side, side, window, shift, b.dtype())?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let ws = self.window;
        let hp = h.div_ceil(ws) * ws;
        let wp = w.div_ceil(ws) * ws;
        let mut t = self.norm1.forward(x)?;
        if hp != h || wp != w {
            t = t.pad_with_zeros(1, 0, hp - h)?.pad_with_zeros(2, 0, wp - w)?;
        }
        if self.shift > 0 {
            t = ops::roll_left(&ops::roll_left(&t, self.shift, 1)?, self.shift, 2)?;
        }
        let windows = window_partition(&t, ws)?;
        let attended = self.attn.forward(&windows, self.mask.as_ref())?;
        let mut t = window_merge(&attended, ws, b, hp, wp)?;
        if self.shift > 0 {
            t = ops::roll_right(&ops::roll_right(&t, self.shift, 1)?, self.shift, 2)?;
        }
        if hp != h || wp != w {
            t = t.narrow(1, 0, h)?.narrow(2, 0, w)?;
        }
        let x = (x + t)?;
        let hidden = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?;
        Ok((&x + self.fc2.forward(&hidden)?)?)
    }
}

/// 2×2 token aggregation: halves the grid and doubles the channels.
#[derive(Debug, Clone)]
struct PatchMerging {
    norm: LayerNorm,
    reduction: Linear,
}

impl PatchMerging {
    fn new(b: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&b.pp("norm"), 4 * dim)?,
            reduction: Linear::new(&b.pp("reduction"), 4 * dim, 2 * dim, false, Init::TruncNormal { std: 0.02 })?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        // (b, h/2, dy, w/2, dx, c) -> (b, h/2, w/2, dx, dy, c): concatenation order
        // (0,0), (1,0), (0,1), (1,1) in (dy, dx).
        let merged = x
            .reshape(vec![b, h / 2, 2, w / 2, 2, c])?
            .permute([0, 1, 3, 4, 2, 5])?
            .contiguous()?
            .reshape((b, h / 2, w / 2, 4 * c))?;
        self.reduction.forward(&self.norm.forward(&merged)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<SwinBlock>,
    norm: LayerNorm,
    merge: Option<PatchMerging>,
}

/// Four-stage shifted-window transformer producing the feature hierarchy `f0..f3`.
#[derive(Debug, Clone)]
pub struct SwinBackbone {
    patch_embed: Conv2d,
    embed_norm: LayerNorm,
    stages: Vec<Stage>,
    config: ModelConfig,
}

impl SwinBackbone {
    pub fn new(b: &ParamBuilder, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let p = config.patch_size;
        let c0 = config.stage_dims[0];
        let patch_embed = Conv2d::new(
            &b.pp("patch_embed.proj"),
            3,
            c0,
            p,
            p,
            0,
            true,
            Init::TruncNormal { std: 0.02 },
        )?;
        let embed_norm = LayerNorm::new(&b.pp("patch_embed.norm"), c0)?;
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let sb = b.pp(format!("stage{i}"));
            let dim = config.stage_dims[i];
            let side = config.level_side(i);
            let (window, shift) = config.stage_window(i);
            let blocks = (0..config.stage_depths[i])
                .map(|j| {
                    let block_shift = if j % 2 == 1 { shift } else { 0 };
                    SwinBlock::new(
                        &sb.pp(format!("block{j}")),
                        dim,
                        config.stage_heads[i],
                        config.mlp_ratio,
                        side,
                        window,
                        block_shift,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(&sb.pp("norm"), dim)?;
            let merge = if i < 3 {
                Some(PatchMerging::new(&sb.pp("merge"), dim)?)
            } else {
                None
            };
            stages.push(Stage { blocks, norm, merge });
        }
        Ok(Self {
            patch_embed,
            embed_norm,
            stages,
            config: config.clone(),
        })
    }

    pub fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.config.input_size;
        if c != 3 || h != s || w != s {
            config_bail!("backbone expects (B, 3, {s}, {s}) input, got {:?}", images.dims());
        }
        let mut x = self
            .embed_norm
            .forward(&self.patch_embed.forward(images)?.permute((0, 2, 3, 1))?)?;
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.forward(&x)?;
            }
            levels.push(
                stage
                    .norm
                    .forward(&x)?
                    .permute((0, 3, 1, 2))?
                    .contiguous()?,
            );
            if let Some(merge) = &stage.merge {
                x = merge.forward(&x)?;
            }
        }
        Ok(FeaturePyramid::new(levels))
    }

    /// `(window, shift)` used by every block, stage-major.
    pub fn block_windows(&self) -> Vec<Vec<(usize, usize)>> {
        self.stages
            .iter()
            .map(|s| s.blocks.iter().map(|b| (b.window, b.shift)).collect())
            .collect()
    }
}
