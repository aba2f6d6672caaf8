//! Discretized Gaussian (location-scale) likelihoods for y_hat.

use candle_core::Tensor;
use statrs::function::erf::erfc;

use crate::error::Result;

/// Lower bound on per-symbol likelihoods in the differentiable rate.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Smallest scale the entropy model may emit.
pub const SIGMA_MIN: f64 = 0.11;

pub fn std_normal_cdf(t: f64) -> f64 {
    0.5 * erfc(-t / std::f64::consts::SQRT_2)
}

/// Mass of the unit-width bin centred at `residual` under N(0, sigma^2).
/// Evaluated on the lower tail (`-|residual|`) so both terms stay accurate.
pub fn bin_probability(residual: f64, sigma: f64) -> f64 {
    let v = residual.abs();
    std_normal_cdf((0.5 - v) / sigma) - std_normal_cdf((-0.5 - v) / sigma)
}

/// `-log2` of [`bin_probability`], floored like the training rate.
pub fn bits_f64(residual: f64, sigma: f64) -> f64 {
    -bin_probability(residual, sigma).max(LIKELIHOOD_FLOOR).log2()
}

fn std_normal_cdf_tensor(t: &Tensor) -> Result<Tensor> {
    Ok((((t * std::f64::consts::FRAC_1_SQRT_2)?.erf()? + 1.0)? * 0.5)?)
}

/// Per-element bin likelihood of `y_hat` under N(mu, sigma^2).
pub fn gaussian_likelihood(y_hat: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    let v = (y_hat - mu)?.abs()?;
    let upper = std_normal_cdf_tensor(&((v.neg()? + 0.5)?.div(sigma))?)?;
    let lower = std_normal_cdf_tensor(&((v.neg()? - 0.5)?.div(sigma))?)?;
    Ok((upper - lower)?.maximum(LIKELIHOOD_FLOOR)?)
}

/// Per-element bits `-log2 P(y_hat)`.
pub fn gaussian_bits(y_hat: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    Ok((gaussian_likelihood(y_hat, mu, sigma)?.log()? * (-std::f64::consts::LOG2_E))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    /// Composite Simpson integration of the N(0, 1) density.
    fn mass_by_quadrature(a: f64, b: f64) -> f64 {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let f = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    fn tensor_bits(y: f64, mu: f64, sigma: f64) -> f64 {
        let t = |v: f64| Tensor::new(&[v], &Device::Cpu).unwrap();
        gaussian_bits(&t(y), &t(mu), &t(sigma))
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()[0]
    }

    #[test]
    fn bits_match_quadrature_oracle() {
        let p0 = mass_by_quadrature(-0.5, 0.5);
        assert!((p0 - 0.3829249).abs() < 1e-7);
        assert!((-p0.log2() - 1.3849).abs() < 1e-4);
        assert!((tensor_bits(0.0, 0.0, 1.0) - (-p0.log2())).abs() < 1e-9);
        assert!((bits_f64(0.0, 1.0) - (-p0.log2())).abs() < 1e-9);

        let p3 = mass_by_quadrature(2.5, 3.5);
        assert!((-p3.log2() - 7.386).abs() < 1e-3);
        assert!((tensor_bits(3.0, 0.0, 1.0) - (-p3.log2())).abs() < 1e-8);
        assert!((bits_f64(3.0, 1.0) - (-p3.log2())).abs() < 1e-9);
    }

    #[test]
    fn bits_are_symmetric_about_the_mean() {
        for k in 0..8 {
            let k = k as f64;
            let a = tensor_bits(0.3 + k, 0.3, 1.7);
            let b = tensor_bits(0.3 - k, 0.3, 1.7);
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn far_tail_is_floored_not_infinite() {
        let b = tensor_bits(500.0, 0.0, SIGMA_MIN);
        assert!(b.is_finite());
        assert!((b - (-LIKELIHOOD_FLOOR.log2())).abs() < 1e-9);
        assert!(bits_f64(500.0, SIGMA_MIN).is_finite());
    }

    #[test]
    fn host_bin_probabilities_sum_to_one() {
        for sigma in [SIGMA_MIN, 0.5, 1.0, 7.3] {
            let s: f64 = (-200..=200).map(|r| bin_probability(r as f64, sigma)).sum();
            assert!((s - 1.0).abs() < 1e-12, "{sigma}: {s}");
        }
    }
}
