use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;

use super::ops;
use super::params::{Init, ParamBuilder};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &ParamBuilder, in_dim: usize, out_dim: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = b.param("weight", (out_dim, in_dim), init)?;
        let bias = if bias {
            Some(b.param("bias", out_dim, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Applies the layer over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("linear input must have a dimension");
        let rows = x.elem_count() / in_dim;
        let mut y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        if let Some(bias) = &self.bias {
            y = y.broadcast_add(bias)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &ParamBuilder,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = b.param("weight", (out_c, in_c, kernel, kernel), init)?;
        let bias = if bias {
            Some(b.param("bias", out_c, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(b: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", dim, Init::Ones)?,
            bias: b.param("bias", dim, Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::layer_norm(x, &self.weight, &self.bias, 1e-5)?)
    }
}

/// Batch normalization over the channel axis of NCHW input.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(b: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", channels, Init::Ones)?,
            bias: b.param("bias", channels, Init::Zeros)?,
            running_mean: b.buffer("running_mean", channels, Init::Zeros)?,
            running_var: b.buffer("running_var", channels, Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    fn channel_mean(x: &Tensor) -> candle_core::Result<Tensor> {
        x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)
    }

    /// In training mode normalizes with batch statistics and updates the running estimates.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let mean = Self::channel_mean(x)?;
            let var = Self::channel_mean(&x.broadcast_sub(&mean)?.sqr()?)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = ((self.running_mean.as_detached_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_detached_tensor() * (1.0 - m))?
                + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_detached_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_detached_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Inverted dropout with an explicit RNG so runs are reproducible.
pub fn dropout(x: &Tensor, p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), &Device::Cpu)?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

/// Global average over the spatial axes of NCHW input, keeping `(B, C, 1, 1)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?)
}

pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.max_keepdim(D::Minus1)?.max_keepdim(D::Minus2)?)
}

pub fn constant(values: Vec<f64>, shape: impl Into<candle_core::Shape>, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;

    #[test]
    fn batch_norm_train_normalizes_and_tracks() {
        let store = ParamStore::new(0, DType::F64);
        let bn = BatchNorm2d::new(&store.builder().pp("bn"), 2).unwrap();
        let x = Tensor::randn(0f64, 1.0, (4, 2, 3, 3), &Device::Cpu).unwrap().affine(3.0, 5.0).unwrap();
        let y = bn.forward_t(&x, true).unwrap();
        let mean = y.mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(mean.abs() < 1e-9);
        let rm = store.get("bn.running_mean").unwrap().to_vec1::<f64>().unwrap();
        assert!(rm.iter().all(|v| *v > 0.3), "{rm:?}");
    }

    #[test]
    fn dropout_zero_is_identity_and_scales() {
        let x = Tensor::ones(1000, DType::F64, &Device::Cpu).unwrap();
        let mut rng = rand::rng();
        let same = dropout(&x, 0.0, &mut rng).unwrap();
        assert_eq!(same.to_vec1::<f64>().unwrap(), x.to_vec1::<f64>().unwrap());
        let d = dropout(&x, 0.5, &mut rng).unwrap().to_vec1::<f64>().unwrap();
        assert!(d.iter().all(|v| *v == 0.0 || *v == 2.0));
    }
}
