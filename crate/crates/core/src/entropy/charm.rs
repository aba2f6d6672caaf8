//! Transformer-based slice transforms of the channel-wise autoregressive
//! model.
//!
//! Slice `i` of y is modelled as N(mu_i, sigma_i^2) where `(mu_i, sigma_i)`
//! come from a linear projection of `concat(hyper, y_hat_0, ..., y_hat_{i-1})`
//! to `2 * c_s` channels followed by two SwinT blocks (plain, then shifted).
//! The first `c_s` output channels are the mean, the rest the pre-softplus
//! scale.

use candle_core::Tensor;

use crate::config::{ModelConfig, SwinStageConfig};
use crate::error::{Error, Result};
use crate::layers::{softplus, Linear};
use crate::params::Scope;
use crate::transforms::SwinBlock;

use super::gaussian::SIGMA_MIN;

/// Distribution parameters for one latent slice, `(B, h, w, c_s)` each.
#[derive(Debug, Clone)]
pub struct SliceParams {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub slice_index: usize,
}

#[derive(Debug, Clone)]
struct SliceTransform {
    proj: Linear,
    blocks: Vec<SwinBlock>,
}

impl SliceTransform {
    fn flops(&self, h: usize, w: usize) -> u64 {
        2 * (h * w * self.proj.in_dim() * self.proj.out_dim()) as u64
            + self.blocks.iter().map(|b| b.flops(h, w)).sum::<u64>()
    }
}

#[derive(Debug, Clone)]
pub struct Charm {
    slices: Vec<SliceTransform>,
    slice_channels: usize,
    hyper_channels: usize,
}

impl Charm {
    pub fn new(s: &mut Scope, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let cs = cfg.slice_channels();
        let stage = SwinStageConfig::new(cfg.charm.depth, 2 * cs, cfg.charm.window_size, cfg.charm.num_heads);
        let mut slices = Vec::new();
        for i in 0..cfg.charm.num_slices {
            let mut si = s.pp(format!("slice{i}"));
            let proj = Linear::new(&mut si.pp("proj"), cfg.hyper_feature_channels + i * cs, 2 * cs, true)?;
            let blocks = (0..stage.depth)
                .map(|j| SwinBlock::new(&mut si.pp(format!("block{j}")), &stage, j % 2 == 1))
                .collect::<Result<Vec<_>>>()?;
            slices.push(SliceTransform { proj, blocks });
        }
        Ok(Self {
            slices,
            slice_channels: cs,
            hyper_channels: cfg.hyper_feature_channels,
        })
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn slice_channels(&self) -> usize {
        self.slice_channels
    }

    /// Parameters of slice `i` from the hyper features and exactly the `i`
    /// already-decoded slices. Nothing else enters the computation, which is
    /// what makes single-pass decoding possible.
    pub fn params(&self, hyper: &Tensor, decoded: &[Tensor], i: usize) -> Result<SliceParams> {
        if i >= self.slices.len() {
            return Err(Error::Protocol(format!(
                "slice index {i} out of range for {} slices",
                self.slices.len()
            )));
        }
        if decoded.len() != i {
            return Err(Error::Protocol(format!(
                "slice {i} needs exactly {i} conditioning slices, got {}",
                decoded.len()
            )));
        }
        let (_, _, _, ch) = hyper.dims4()?;
        if ch != self.hyper_channels {
            return Err(Error::Config(format!(
                "hyper features have {ch} channels, expected {}",
                self.hyper_channels
            )));
        }
        let mut parts = vec![hyper.clone()];
        parts.extend(decoded.iter().cloned());
        let input = Tensor::cat(&parts, 3)?;
        let st = &self.slices[i];
        let mut x = st.proj.forward(&input)?;
        for b in &st.blocks {
            x = b.forward(&x)?;
        }
        let cs = self.slice_channels;
        let mu = x.narrow(3, 0, cs)?;
        let sigma = (softplus(&x.narrow(3, cs, cs)?)? + SIGMA_MIN)?;
        Ok(SliceParams {
            mu,
            sigma,
            slice_index: i,
        })
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.slices.iter().map(|s| s.flops(h, w)).sum()
    }
}

/// Even channel-contiguous split of y into `num_slices` parts.
pub fn split_slices(y: &Tensor, num_slices: usize) -> Result<Vec<Tensor>> {
    let c = y.dim(3)?;
    if num_slices == 0 || c % num_slices != 0 {
        return Err(Error::Config(format!(
            "cannot split {c} channels into {num_slices} slices"
        )));
    }
    let cs = c / num_slices;
    (0..num_slices).map(|i| Ok(y.narrow(3, i * cs, cs)?)).collect()
}

pub fn concat_slices(slices: &[Tensor]) -> Result<Tensor> {
    Ok(Tensor::cat(slices, 3)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::transforms::swin::tests::random_map;
    use candle_core::DType;

    #[test]
    fn split_examples() {
        let y = random_map((1, 2, 2, 96), 0);
        let s = split_slices(&y, 4).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|t| t.dims() == [1, 2, 2, 24]));
        let one = split_slices(&y, 1).unwrap();
        assert_eq!(one.len(), 1);
        let back = concat_slices(&s).unwrap();
        assert_eq!(
            back.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            y.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        assert!(matches!(split_slices(&y, 5), Err(Error::Config(_))));
    }

    #[test]
    fn params_shapes_and_floor() {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new(0, DType::F64);
        let charm = Charm::new(&mut store.root().pp("charm"), &cfg).unwrap();
        let hyper = random_map((1, 4, 4, 128), 1);
        let y = random_map((1, 4, 4, 96), 2);
        let slices = split_slices(&y, 4).unwrap();
        for i in 0..4 {
            let p = charm.params(&hyper, &slices[..i], i).unwrap();
            assert_eq!(p.mu.dims(), &[1, 4, 4, 24]);
            assert_eq!(p.sigma.dims(), &[1, 4, 4, 24]);
            let min = p.sigma.min_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(min >= SIGMA_MIN);
        }
    }

    #[test]
    fn wrong_conditioning_count_is_a_protocol_error() {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new(0, DType::F64);
        let charm = Charm::new(&mut store.root().pp("charm"), &cfg).unwrap();
        let hyper = random_map((1, 4, 4, 128), 1);
        let y = random_map((1, 4, 4, 24), 2);
        assert!(matches!(charm.params(&hyper, &[y.clone()], 2), Err(Error::Protocol(_))));
        assert!(matches!(charm.params(&hyper, &[], 4), Err(Error::Protocol(_))));
    }
}
