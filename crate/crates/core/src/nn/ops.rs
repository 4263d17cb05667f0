//! Differentiable tensor primitives that candle either lacks or only offers without a
//! backward pass (bilinear resize, softmax) or with a slow one (2-D convolution).

use candle_core::{
    backend::BackendStorage, CpuStorage, CustomOp1, DType, Layout, Result, Shape, Tensor, D,
};

/// Geometry shared by the im2col / col2im pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PatchGeometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl PatchGeometry {
    fn out_hw(&self) -> (usize, usize) {
        let ho = (self.height + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (self.width + 2 * self.padding - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    fn row_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Calls `f(col_index, src_index)` for every in-bounds tap of output location `(oy, ox)`.
    #[inline]
    fn for_each_tap(&self, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
        let k = self.kernel;
        for ci in 0..self.channels {
            for ky in 0..k {
                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                if iy < 0 || iy >= self.height as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                    if ix < 0 || ix >= self.width as isize {
                        continue;
                    }
                    let col = (ci * k + ky) * k + kx;
                    let src = (ci * self.height + iy as usize) * self.width + ix as usize;
                    f(col, src);
                }
            }
        }
    }

    fn im2col<T: Copy + Default>(&self, src: &[T], batch: usize) -> Vec<T> {
        let (ho, wo) = self.out_hw();
        let row = self.row_len();
        let plane = self.channels * self.height * self.width;
        let mut out = vec![T::default(); batch * ho * wo * row];
        for b in 0..batch {
            let img = &src[b * plane..(b + 1) * plane];
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = ((b * ho + oy) * wo + ox) * row;
                    let dst = &mut out[base..base + row];
                    self.for_each_tap(oy, ox, |col, s| dst[col] = img[s]);
                }
            }
        }
        out
    }

    fn col2im<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T], batch: usize) -> Vec<T> {
        let (ho, wo) = self.out_hw();
        let row = self.row_len();
        let plane = self.channels * self.height * self.width;
        let mut out = vec![T::default(); batch * plane];
        for b in 0..batch {
            let img = &mut out[b * plane..(b + 1) * plane];
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = ((b * ho + oy) * wo + ox) * row;
                    let src = &cols[base..base + row];
                    self.for_each_tap(oy, ox, |col, s| img[s] += src[col]);
                }
            }
        }
        out
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("patch ops require contiguous input"),
    }
}

struct Im2Col(PatchGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        let (batch, c, h, w) = layout.shape().dims4()?;
        if (c, h, w) != (g.channels, g.height, g.width) {
            candle_core::bail!("im2col geometry mismatch: {:?} vs {:?}", layout.shape(), g)
        }
        let (ho, wo) = g.out_hw();
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.im2col(contiguous_slice(v, layout)?, batch)),
            CpuStorage::F64(v) => CpuStorage::F64(g.im2col(contiguous_slice(v, layout)?, batch)),
            other => Err(candle_core::Error::UnsupportedDTypeForOp(
                other.dtype(),
                "im2col",
            ))?,
        };
        Ok((out, Shape::from((batch, ho * wo, g.row_len()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

struct Col2Im(PatchGeometry);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        let (batch, _, _) = layout.shape().dims3()?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.col2im(contiguous_slice(v, layout)?, batch)),
            CpuStorage::F64(v) => CpuStorage::F64(g.col2im(contiguous_slice(v, layout)?, batch)),
            other => Err(candle_core::Error::UnsupportedDTypeForOp(
                other.dtype(),
                "col2im",
            ))?,
        };
        Ok((out, Shape::from((batch, g.channels, g.height, g.width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

/// Extracts sliding `kernel × kernel` patches: `(B, C, H, W)` → `(B, Ho·Wo, C·k·k)`.
///
/// Column order is `(c, ky, kx)`, matching a `(C_out, C, k, k)` weight flattened row-major.
pub fn im2col(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if h + 2 * padding < kernel || w + 2 * padding < kernel || stride == 0 {
        candle_core::bail!("im2col: kernel {kernel} does not fit {h}x{w} with padding {padding}")
    }
    let geometry = PatchGeometry {
        channels: c,
        height: h,
        width: w,
        kernel,
        stride,
        padding,
    };
    x.contiguous()?.apply_op1(Im2Col(geometry))
}

/// 2-D convolution lowered to im2col + matmul. `weight` is `(C_out, C_in, k, k)`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (c_out, c_in, k, k2) = weight.dims4()?;
    if c_in != c || k != k2 {
        candle_core::bail!("conv2d: input has {c} channels, weight {:?}", weight.shape())
    }
    let y = if k == 1 && stride == 1 && padding == 0 {
        let w2 = weight.reshape((c_out, c_in))?;
        w2.broadcast_matmul(&x.reshape((b, c, h * w))?)?
            .reshape((b, c_out, h, w))?
    } else {
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;
        let cols = im2col(x, k, stride, padding)?.reshape((b * ho * wo, c * k * k))?;
        let w2 = weight.reshape((c_out, c * k * k))?;
        cols.matmul(&w2.t()?)?
            .reshape((b, ho, wo, c_out))?
            .permute((0, 3, 1, 2))?
    };
    match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((1, c_out, 1, 1))?),
        None => Ok(y),
    }
}

/// Interpolation matrix `(out, in)` for 1-D linear resampling with half-pixel centres
/// (`align_corners = false`).
pub fn linear_interp_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[o * in_len + i0] += 1.0 - frac;
        m[o * in_len + i1] += frac;
    }
    m
}

/// Bilinear resize of a `(B, C, H, W)` tensor expressed as two matmuls, so it is differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rows = Tensor::from_vec(linear_interp_matrix(h, out_h), (out_h, h), dev)?
        .to_dtype(x.dtype())?;
    let cols = Tensor::from_vec(linear_interp_matrix(w, out_w), (out_w, w), dev)?
        .to_dtype(x.dtype())?;
    let x3 = x.reshape((b * c, h, w))?;
    let t = x3.broadcast_matmul(&cols.t()?)?;
    rows.broadcast_matmul(&t)?.reshape((b, c, out_h, out_w))
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// Layer normalization over the last dimension.
pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    normed.broadcast_mul(weight)?.broadcast_add(bias)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    candle_nn::ops::sigmoid(x)
}

/// Cyclic shift along `dim`: element `i` of the result is element `(i + shift) mod n` of `x`.
pub fn roll_left(x: &Tensor, shift: usize, dim: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    let shift = shift % n;
    if shift == 0 {
        return Ok(x.clone());
    }
    Tensor::cat(&[x.narrow(dim, shift, n - shift)?, x.narrow(dim, 0, shift)?], dim)
}

/// Inverse of [`roll_left`].
pub fn roll_right(x: &Tensor, shift: usize, dim: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    roll_left(x, n - shift % n, dim)
}

/// Scalar tensor of the given dtype on the CPU.
pub fn scalar(value: f64, dtype: DType) -> Result<Tensor> {
    Tensor::new(value, &candle_core::Device::Cpu)?.to_dtype(dtype)
}
