//! Separable bicubic resampling (Catmull-Rom, a = -0.5) with replicate
//! boundary handling.
//!
//! Each output sample is written as `x[i1] + sum_k w_k * (x[i_k] - x[i1])`
//! where `i1` is the tap at offset 0. For a constant input every difference
//! is exactly zero, so constants are reproduced bit-exactly on any grid.

use candle_core::Tensor;

use super::grid::{centers, SamplingGrid};
use crate::error::{Error, Result};

pub const CUBIC_A: f64 = -0.5;

/// Catmull-Rom kernel.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Per-axis gain: a plain number, or a scalar tensor when the gain should
/// carry gradient (it depends on the estimated resize factor).
#[derive(Debug, Clone)]
pub enum Gain<'a> {
    Fixed(f64),
    Tensor(&'a Tensor),
}

/// Snap coordinates that are integral up to rounding noise.
fn snap(p: f64) -> f64 {
    if (p - p.round()).abs() < 1e-9 {
        p.round()
    } else {
        p
    }
}

/// Catmull-Rom weights for taps at offsets -1, 0, 1, 2 as tensor
/// polynomials of the fractional offset `t`.
fn tap_weights(t: &Tensor) -> Result<[Tensor; 4]> {
    let a = CUBIC_A;
    let near = |x: &Tensor| -> Result<Tensor> {
        // ((a + 2) x - (a + 3)) x^2 + 1
        Ok(((((x * (a + 2.0))? - (a + 3.0))? * x.sqr()?)? + 1.0)?)
    };
    let far = |x: &Tensor| -> Result<Tensor> {
        // ((a x - 5a) x + 8a) x - 4a
        Ok((((((x * a)? - 5.0 * a)? * x)? + 8.0 * a)? * x)?.affine(1.0, -4.0 * a)?)
    };
    let one_minus = t.affine(-1.0, 1.0)?;
    Ok([
        far(&(t + 1.0)?)?,
        near(t)?,
        near(&one_minus)?,
        far(&(one_minus + 1.0)?)?,
    ])
}

/// Resample one spatial axis (`dim` 1 = rows, 2 = columns) of an NHWC
/// tensor onto `n_dst` samples.
fn resample_axis(x: &Tensor, dim: usize, n_dst: usize, gain: &Gain) -> Result<Tensor> {
    let n_src = x.dim(dim)?;
    let dev = x.device();
    let dtype = x.dtype();
    let norm = centers(n_dst);
    let gain_value = match gain {
        Gain::Fixed(g) => *g,
        Gain::Tensor(t) => t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?,
    };
    // Source pixel coordinate p = c0 + c1 * gain.
    let c0 = (n_src as f64 - 1.0) / 2.0;
    let c1: Vec<f64> = norm.iter().map(|u| u * n_src as f64 / 2.0).collect();
    let p: Vec<f64> = c1.iter().map(|c| snap(c0 + c * gain_value)).collect();
    let base: Vec<f64> = p.iter().map(|v| v.floor()).collect();

    let t = match gain {
        Gain::Fixed(_) => {
            let t: Vec<f64> = p.iter().zip(&base).map(|(p, b)| p - b).collect();
            Tensor::from_vec(t, n_dst, dev)?.to_dtype(dtype)?
        }
        Gain::Tensor(g) => {
            // Same values as above, but differentiable in the gain.
            let c1t = Tensor::from_vec(c1.clone(), n_dst, dev)?.to_dtype(dtype)?;
            let shift: Vec<f64> = base.iter().map(|b| c0 - b).collect();
            let shift = Tensor::from_vec(shift, n_dst, dev)?.to_dtype(dtype)?;
            let g = g.to_dtype(dtype)?.reshape(1)?;
            let raw = c1t.broadcast_mul(&g)?.add(&shift)?;
            // Values snapped on the host side; keep the gradient of `raw`.
            let exact: Vec<f64> = p.iter().zip(&base).map(|(p, b)| p - b).collect();
            let exact = Tensor::from_vec(exact, n_dst, dev)?.to_dtype(dtype)?;
            (&raw + (exact - &raw)?.detach())?
        }
    };
    let weights = tap_weights(&t)?;

    let clamp = |k: f64| -> u32 { k.clamp(0.0, (n_src - 1) as f64) as u32 };
    let idx = |off: f64| -> Result<Tensor> {
        let v: Vec<u32> = base.iter().map(|b| clamp(b + off)).collect();
        Ok(Tensor::from_vec(v, n_dst, dev)?)
    };
    let shape: Vec<usize> = (0..4).map(|d| if d == dim { n_dst } else { 1 }).collect();
    let center = x.index_select(&idx(0.0)?, dim)?;
    let mut out = center.clone();
    for (k, off) in [(0usize, -1.0), (2, 1.0), (3, 2.0)] {
        let tap = x.index_select(&idx(off)?, dim)?;
        let w = weights[k].reshape(shape.as_slice())?;
        out = (out + (tap - &center)?.broadcast_mul(&w)?)?;
    }
    Ok(out)
}

/// Resample an NHWC image onto `grid`.
pub fn bicubic_sample(x: &Tensor, grid: &SamplingGrid) -> Result<Tensor> {
    bicubic_sample_with_gain(x, grid, Gain::Fixed(grid.gain.0), Gain::Fixed(grid.gain.1))
}

/// Like [`bicubic_sample`] but with explicit per-axis gains, which may be
/// tensors so that the estimated resize factor receives gradient.
pub fn bicubic_sample_with_gain(x: &Tensor, grid: &SamplingGrid, gain_h: Gain, gain_w: Gain) -> Result<Tensor> {
    let (_, h, w, _) = x.dims4()?;
    if (h, w) != grid.src {
        return Err(Error::Precondition(format!(
            "grid expects a {:?} source, got {h}x{w}",
            grid.src
        )));
    }
    let rows = resample_axis(&x.contiguous()?, 1, grid.dst.0, &gain_h)?;
    resample_axis(&rows, 2, grid.dst.1, &gain_w)
}
