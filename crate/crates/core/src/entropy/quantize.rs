use candle_core::Tensor;
use rand::Rng;

use crate::error::{Error, Result};

/// How rounding behaves in the differentiable training path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantMode {
    /// Hard rounding with a straight-through (identity) gradient.
    #[default]
    Round,
    /// Additive uniform noise in `[-0.5, 0.5)` for the rate term; synthesis
    /// still sees hard-rounded values.
    Noise,
    /// No quantization at all. Only for gradient checks of the entropy-model
    /// math.
    Identity,
}

/// Round half away from zero.
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// `round(v - mu) + mu` with a straight-through gradient. `mu = None` means
/// zero.
pub fn quantize(v: &Tensor, mu: Option<&Tensor>) -> Result<Tensor> {
    // NaN does not survive a sum, unlike max.
    let finite = v
        .abs()?
        .sum_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?;
    if !finite.is_finite() {
        return Err(Error::NonFinite("quantize input"));
    }
    let rounded = match mu {
        Some(mu) => ((v - mu)?.round()? + mu)?,
        None => v.round()?,
    };
    Ok((v + (rounded - v)?.detach())?)
}

pub(crate) fn add_uniform_noise<R: Rng>(v: &Tensor, rng: &mut R) -> Result<Tensor> {
    let noise: Vec<f64> = (0..v.elem_count()).map(|_| rng.random_range(-0.5..0.5)).collect();
    let noise = Tensor::from_vec(noise, v.shape(), v.device())?.to_dtype(v.dtype())?;
    Ok((v + noise)?)
}

/// Quantize for the training path according to `mode`. Returns
/// `(for_rate, for_synthesis)`.
pub fn quantize_train<R: Rng>(
    v: &Tensor,
    mu: Option<&Tensor>,
    mode: QuantMode,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    match mode {
        QuantMode::Round => {
            let q = quantize(v, mu)?;
            Ok((q.clone(), q))
        }
        QuantMode::Noise => Ok((add_uniform_noise(v, rng)?, quantize(v, mu)?)),
        QuantMode::Identity => Ok((v.clone(), v.clone())),
    }
}
