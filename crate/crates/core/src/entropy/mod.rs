//! Entropy models: quantization, the factorized prior on z_hat, and the
//! spatio-channel autoregressive Gaussian model on y_hat.

pub mod charm;
pub mod factorized;
pub mod gaussian;
pub mod quantize;

use candle_core::Tensor;
use rand::Rng;

pub use charm::{concat_slices, split_slices, Charm, SliceParams};
pub use factorized::{ChannelPrior, FactorizedPrior};
pub use gaussian::{gaussian_bits, gaussian_likelihood, LIKELIHOOD_FLOOR, SIGMA_MIN};
pub use quantize::{quantize, round_half_away, QuantMode};

use crate::error::Result;
use crate::transforms::HyperSynthesis;

/// Differentiable rate estimate for one batch.
#[derive(Debug, Clone)]
pub struct RateOutput {
    /// Total bits over the batch for y (scalar tensor).
    pub bits_y: Tensor,
    /// Total bits over the batch for z (scalar tensor).
    pub bits_z: Tensor,
    /// Quantized y as fed to the synthesis transform.
    pub y_hat: Tensor,
    pub z_hat: Tensor,
    pub params: Vec<SliceParams>,
}

/// Rate of `(y, z)` under the hyperprior + autoregressive slice model.
/// Slice `i` is conditioned on the quantized slices before it.
pub fn total_rate<R: Rng>(
    y: &Tensor,
    z: &Tensor,
    hyper_synthesis: &HyperSynthesis,
    prior: &FactorizedPrior,
    charm: &Charm,
    mode: QuantMode,
    rng: &mut R,
) -> Result<RateOutput> {
    let (z_rate, z_hat) = quantize::quantize_train(z, None, mode, rng)?;
    let bits_z = prior.bits(&z_rate)?.sum_all()?;
    let hyper = hyper_synthesis.forward(&z_hat)?;

    let slices = split_slices(y, charm.num_slices())?;
    let mut decoded = Vec::with_capacity(slices.len());
    let mut params = Vec::with_capacity(slices.len());
    let mut bits_y: Option<Tensor> = None;
    for (i, slice) in slices.iter().enumerate() {
        let p = charm.params(&hyper, &decoded, i)?;
        let (rate_in, synth_in) = quantize::quantize_train(slice, Some(&p.mu), mode, rng)?;
        let b = gaussian_bits(&rate_in, &p.mu, &p.sigma)?.sum_all()?;
        bits_y = Some(match bits_y {
            Some(acc) => (acc + b)?,
            None => b,
        });
        decoded.push(synth_in);
        params.push(p);
    }
    Ok(RateOutput {
        bits_y: bits_y.expect("at least one slice"),
        bits_z,
        y_hat: concat_slices(&decoded)?,
        z_hat,
        params,
    })
}
