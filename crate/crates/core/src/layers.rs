//! Small differentiable building blocks shared by the transforms, the entropy
//! model and the scale-adaptation sandwich. All are composed from primitive
//! candle ops so that reverse-mode gradients exist for every one of them.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::params::{Init, Scope};

#[derive(Debug, Clone)]
pub struct Linear {
    pub(crate) weight: Tensor,
    pub(crate) bias: Option<Tensor>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(s: &mut Scope, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_init(s, in_dim, out_dim, bias, Init::TruncNormal(0.02))
    }

    pub fn with_init(s: &mut Scope, in_dim: usize, out_dim: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = s.param("weight", &[out_dim, in_dim], init)?;
        let bias = if bias {
            Some(s.param("bias", &[out_dim], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    /// Applies the projection over the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let n: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((n, self.in_dim))?;
        let mut out = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            out = out.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(out.reshape(out_dims)?)
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: s.param("weight", &[dim], Init::Const(1.0))?,
            bias: s.param("bias", &[dim], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// 2-D convolution on NCHW tensors with square kernels and zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl Conv2d {
    pub fn new(
        s: &mut Scope,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        let fan_in = (in_ch / groups) * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            weight: s.param(
                "weight",
                &[out_ch, in_ch / groups, kernel, kernel],
                Init::Uniform(-bound, bound),
            )?,
            bias: s.param("bias", &[out_ch], Init::Uniform(-bound, bound))?,
            stride,
            padding: kernel / 2,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, self.groups)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// `log(1 + exp(x))`, evaluated without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// NHWC -> NCHW.
pub fn to_nchw(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 3, 1, 2))?.contiguous()?)
}

/// NCHW -> NHWC.
pub fn to_nhwc(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 2, 3, 1))?.contiguous()?)
}
