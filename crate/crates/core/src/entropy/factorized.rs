//! Channel-wise fully factorized prior for z_hat.
//!
//! Each channel has a learned monotone cumulative `c(x) = sigmoid(f(x))`
//! where `f` is a chain of K = 4 elementwise-monotone affine layers with
//! widths `1 -> 3 -> 3 -> 3 -> 1`. Monotonicity comes from softplus-
//! parameterized matrices and `tanh`-gated nonlinearities whose gate is
//! bounded below by -1.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::layers::{sigmoid, softplus};
use crate::params::{Init, Scope};

use super::gaussian::LIKELIHOOD_FLOOR;

const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
const INIT_SCALE: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct FactorizedPrior {
    matrices: Vec<Tensor>,
    biases: Vec<Tensor>,
    factors: Vec<Tensor>,
    channels: usize,
}

impl FactorizedPrior {
    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        let layers = FILTERS.len() - 1;
        let scale = INIT_SCALE.powf(1.0 / layers as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for k in 0..layers {
            let (fin, fout) = (FILTERS[k], FILTERS[k + 1]);
            let init = (1.0 / scale / fout as f64).exp_m1().ln();
            matrices.push(s.param(&format!("matrix{k}"), &[channels, fout, fin], Init::Const(init))?);
            biases.push(s.param(&format!("bias{k}"), &[channels, fout, 1], Init::Uniform(-0.5, 0.5))?);
            if k + 1 < layers {
                factors.push(s.param(&format!("factor{k}"), &[channels, fout, 1], Init::Const(0.0))?);
            }
        }
        Ok(Self {
            matrices,
            biases,
            factors,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `x`: `(C, 1, N)` -> cumulative logits `(C, 1, N)`.
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for k in 0..self.matrices.len() {
            x = softplus(&self.matrices[k])?
                .matmul(&x)?
                .broadcast_add(&self.biases[k])?;
            if let Some(f) = self.factors.get(k) {
                x = (&x + f.tanh()?.broadcast_mul(&x.tanh()?)?)?;
            }
        }
        Ok(x)
    }

    fn check_channels(&self, c: usize) -> Result<()> {
        if c != self.channels {
            return Err(Error::Config(format!(
                "factorized prior has {} channels, latent has {c}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Per-element bin likelihood of `z_hat` (`(B, h, w, C)`).
    pub fn likelihood(&self, z_hat: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = z_hat.dims4()?;
        self.check_channels(c)?;
        let cols = z_hat.reshape((b * h * w, c))?.t()?.reshape((c, 1, b * h * w))?;
        let lower = self.logits(&(&cols - 0.5)?)?;
        let upper = self.logits(&(&cols + 0.5)?)?;
        // Evaluate on the side where the sigmoids are not saturated at 1.
        let sign = (&lower + &upper)?.sign()?.neg()?.detach();
        let p = (sigmoid(&(&sign * &upper)?)? - sigmoid(&(&sign * &lower)?)?)?.abs()?;
        let p = p.maximum(LIKELIHOOD_FLOOR)?;
        Ok(p.reshape((c, b * h * w))?.t()?.reshape((b, h, w, c))?)
    }

    pub fn bits(&self, z_hat: &Tensor) -> Result<Tensor> {
        Ok((self.likelihood(z_hat)?.log()? * (-std::f64::consts::LOG2_E))?)
    }

    /// Host-side parameters of one channel in f64.
    pub fn channel_model(&self, channel: usize) -> Result<ChannelPrior> {
        let mut layers = Vec::new();
        for k in 0..self.matrices.len() {
            let m = softplus(&self.matrices[k].get(channel)?.to_dtype(DType::F64)?)?.to_vec2::<f64>()?;
            let b = self.biases[k]
                .get(channel)?
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            let f = match self.factors.get(k) {
                Some(f) => Some(
                    f.get(channel)?
                        .to_dtype(DType::F64)?
                        .flatten_all()?
                        .to_vec1::<f64>()?
                        .into_iter()
                        .map(f64::tanh)
                        .collect(),
                ),
                None => None,
            };
            layers.push((m, b, f));
        }
        Ok(ChannelPrior { layers })
    }
}

type HostLayer = (Vec<Vec<f64>>, Vec<f64>, Option<Vec<f64>>);

/// f64 evaluation of one channel of a [`FactorizedPrior`], used to build
/// coding tables and exact rate estimates.
#[derive(Debug, Clone)]
pub struct ChannelPrior {
    layers: Vec<HostLayer>,
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ChannelPrior {
    pub fn logit(&self, x: f64) -> f64 {
        let mut v = vec![x];
        for (m, b, f) in &self.layers {
            let mut out: Vec<f64> = m
                .iter()
                .zip(b)
                .map(|(row, bias)| row.iter().zip(&v).map(|(a, x)| a * x).sum::<f64>() + bias)
                .collect();
            if let Some(f) = f {
                for (o, g) in out.iter_mut().zip(f) {
                    *o += g * o.tanh();
                }
            }
            v = out;
        }
        v[0]
    }

    pub fn cdf(&self, x: f64) -> f64 {
        sigmoid_f64(self.logit(x))
    }

    /// Mass of the unit bin centred at integer `v`.
    pub fn bin_probability(&self, v: f64) -> f64 {
        let lo = self.logit(v - 0.5);
        let hi = self.logit(v + 0.5);
        if lo + hi > 0.0 {
            sigmoid_f64(-lo) - sigmoid_f64(-hi)
        } else {
            sigmoid_f64(hi) - sigmoid_f64(lo)
        }
    }

    pub fn bits(&self, v: f64) -> f64 {
        -self.bin_probability(v).max(LIKELIHOOD_FLOOR).log2()
    }

    /// Bin masses over `lo..=hi` with the tails beyond folded into the edge
    /// bins, so the result sums to one.
    pub fn pmf(&self, lo: i32, hi: i32) -> Vec<f64> {
        (lo..=hi)
            .map(|s| {
                let s = s as f64;
                if s as i32 == lo {
                    self.cdf(s + 0.5)
                } else if s as i32 == hi {
                    sigmoid_f64(-self.logit(s - 0.5))
                } else {
                    self.bin_probability(s)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::Device;

    fn prior(channels: usize, seed: u64) -> (ParamStore, FactorizedPrior) {
        let mut store = ParamStore::new(seed, DType::F64);
        let p = FactorizedPrior::new(&mut store.root().pp("prior"), channels).unwrap();
        (store, p)
    }

    #[test]
    fn cdf_is_monotone_onto_unit_interval() {
        let (store, p) = prior(3, 1);
        for (name, var) in store.vars() {
            if name.contains("factor") {
                // Push the gates to their most negative setting.
                store.set(name, &(var.ones_like().unwrap() * -5.0).unwrap()).unwrap();
            }
        }
        for c in 0..3 {
            let ch = p.channel_model(c).unwrap();
            let mut prev = 0.0;
            for i in -400..=400 {
                let v = ch.cdf(i as f64 * 0.25);
                assert!(v >= prev, "channel {c} not monotone at {i}");
                prev = v;
            }
            assert!(ch.cdf(-1e4) < 1e-6 && ch.cdf(1e4) > 1.0 - 1e-6);
        }
    }

    #[test]
    fn host_and_tensor_bits_agree() {
        let (_s, p) = prior(2, 2);
        let z = Tensor::new(&[[-2.0f64, 3.0], [0.0, 1.0], [5.0, -1.0]], &Device::Cpu)
            .unwrap()
            .reshape((1, 3, 1, 2))
            .unwrap();
        let bits = p.bits(&z).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let zv = z.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (i, (b, v)) in bits.iter().zip(zv).enumerate() {
            let host = p.channel_model(i % 2).unwrap().bits(v);
            assert!((b - host).abs() < 1e-9, "{b} vs {host}");
        }
    }

    #[test]
    fn bits_do_not_depend_on_position() {
        let (_s, p) = prior(1, 3);
        let z = Tensor::full(1.0f64, (2, 3, 3, 1), &Device::Cpu).unwrap();
        let bits = p.bits(&z).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(bits.iter().all(|&b| b == bits[0]));
    }

    #[test]
    fn folded_pmf_sums_to_one() {
        let (_s, p) = prior(1, 4);
        let pmf = p.channel_model(0).unwrap().pmf(-64, 63);
        assert_eq!(pmf.len(), 128);
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(pmf.iter().all(|&q| q >= 0.0));
    }

    #[test]
    fn channel_mismatch_is_a_config_error() {
        let (_s, p) = prior(2, 5);
        let z = Tensor::zeros((1, 1, 1, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(p.bits(&z), Err(Error::Config(_))));
    }
}
