//! Content-adaptive resizing around the codec: estimate a factor `m`,
//! pre-process and downscale before encoding, upscale and post-process
//! after decoding.

pub mod bicubic;
pub mod convnext;
pub mod grid;
pub mod rpn;

use candle_core::{DType, Tensor};

pub use bicubic::{bicubic_sample, bicubic_sample_with_gain, cubic_kernel, Gain, CUBIC_A};
pub use convnext::{ConvNextBlock, Processor};
pub use grid::{axis_gain, make_grid, scaled_edge, Direction, ResizeFactor, SamplingGrid, MIN_EDGE, M_FRAC_BITS};
pub use rpn::ResizeNet;

use crate::config::ScaleConfig;
use crate::error::{Error, Result};
use crate::params::Scope;

#[derive(Debug, Clone)]
pub struct ScaleAdaptation {
    rpn: ResizeNet,
    pre: Processor,
    post: Processor,
    cfg: ScaleConfig,
}

fn check_image(x: &Tensor) -> Result<(usize, usize)> {
    let (_, h, w, c) = x.dims4()?;
    if c != 3 {
        return Err(Error::Precondition(format!("expected 3 channels, got {c}")));
    }
    Ok((h, w))
}

impl ScaleAdaptation {
    pub fn new(s: &mut Scope, cfg: &ScaleConfig) -> Result<Self> {
        Ok(Self {
            rpn: ResizeNet::new(&mut s.pp("rpn"), cfg)?,
            pre: Processor::new(&mut s.pp("pre"), 3, cfg.convnext_blocks)?,
            post: Processor::new(&mut s.pp("post"), 3, cfg.convnext_blocks)?,
            cfg: *cfg,
        })
    }

    pub fn config(&self) -> &ScaleConfig {
        &self.cfg
    }

    /// Differentiable per-image factors, shape `(B,)`.
    pub fn estimate(&self, x: &Tensor) -> Result<Tensor> {
        self.rpn.forward(x)
    }

    /// Host-side factors for every image of the batch.
    pub fn estimate_resize_factor(&self, x: &Tensor) -> Result<Vec<ResizeFactor>> {
        let m = self.estimate(x)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        m.into_iter()
            .map(|v| {
                if !v.is_finite() {
                    return Err(Error::NonFinite("resize factor"));
                }
                // f32 saturation can land a hair outside the range.
                ResizeFactor::new(v.clamp(self.cfg.m_min, 1.0), self.cfg.m_min)
            })
            .collect()
    }

    pub fn preprocess(&self, x: &Tensor) -> Result<Tensor> {
        check_image(x)?;
        self.pre.forward(x)
    }

    pub fn postprocess(&self, x: &Tensor) -> Result<Tensor> {
        check_image(x)?;
        self.post.forward(x)
    }

    pub fn is_bypassed(&self, m: ResizeFactor) -> bool {
        m.is_near_one(self.cfg.eps_skip)
    }

    /// Pre-process then resample `x` (original size) down by `m`.
    pub fn downscale(&self, x: &Tensor, m: ResizeFactor) -> Result<Tensor> {
        let (h, w) = check_image(x)?;
        let grid = make_grid(m.quantized(), h, w, Direction::Down);
        bicubic_sample(&self.preprocess(x)?, &grid)
    }

    /// Resample a decoded image back to `(h, w)` and post-process.
    pub fn upscale(&self, x: &Tensor, m: ResizeFactor, size: (usize, usize)) -> Result<Tensor> {
        let grid = make_grid(m.quantized(), size.0, size.1, Direction::Up);
        self.postprocess(&bicubic_sample(x, &grid)?)
    }

    /// Returns `x` untouched when `m` is within `eps_skip` of 1, otherwise
    /// its pre-processed downscaled version.
    pub fn maybe_rescale(&self, x: &Tensor, m: ResizeFactor) -> Result<(Tensor, bool)> {
        if self.is_bypassed(m) {
            Ok((x.clone(), false))
        } else {
            Ok((self.downscale(x, m)?, true))
        }
    }

    /// Training downscale where the grid gain carries gradient to the
    /// scalar factor tensor `m`. Grid sizes and sample positions use the
    /// quantized value of `m`.
    pub fn downscale_train(&self, x: &Tensor, m: &Tensor) -> Result<Tensor> {
        let (h, w) = check_image(x)?;
        let (mq, m_snap) = self.snap(m)?;
        let grid = make_grid(mq, h, w, Direction::Down);
        let gh = (m_snap.recip()? * (grid.dst.0 as f64 / h as f64))?;
        let gw = (m_snap.recip()? * (grid.dst.1 as f64 / w as f64))?;
        bicubic_sample_with_gain(&self.preprocess(x)?, &grid, Gain::Tensor(&gh), Gain::Tensor(&gw))
    }

    pub fn upscale_train(&self, x: &Tensor, m: &Tensor, size: (usize, usize)) -> Result<Tensor> {
        let (mq, m_snap) = self.snap(m)?;
        let grid = make_grid(mq, size.0, size.1, Direction::Up);
        let gh = (&m_snap * (size.0 as f64 / grid.src.0 as f64))?;
        let gw = (&m_snap * (size.1 as f64 / grid.src.1 as f64))?;
        let up = bicubic_sample_with_gain(x, &grid, Gain::Tensor(&gh), Gain::Tensor(&gw))?;
        self.postprocess(&up)
    }

    /// Host factor for a scalar tensor, plus the tensor with its value
    /// replaced by the quantized one (gradient passes straight through).
    fn snap(&self, m: &Tensor) -> Result<(ResizeFactor, Tensor)> {
        let v = m.to_dtype(DType::F64)?.reshape(())?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("resize factor"));
        }
        let mq = ResizeFactor::new(v.clamp(self.cfg.m_min, 1.0), self.cfg.m_min)?.quantized();
        let m = m.reshape(())?;
        let exact = Tensor::new(mq.value(), m.device())?.to_dtype(m.dtype())?;
        let snapped = (&m + (exact - &m)?.detach())?;
        Ok((mq, snapped))
    }

    pub fn flops(&self, h: usize, w: usize, m: ResizeFactor) -> u64 {
        let rpn = self.rpn.flops(h, w);
        if self.is_bypassed(m) {
            return rpn;
        }
        // Two processors at full resolution plus two bicubic passes
        // (4 taps x 2 axes, multiply-add) at the small and large sizes.
        let (sh, sw) = (scaled_edge(m, h), scaled_edge(m, w));
        let resample = 2 * 3 * 8 * ((sh * w + sh * sw) + (sh * w + h * w)) as u64;
        rpn + self.pre.flops(h, w) + self.post.flops(h, w) + resample
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::transforms::swin::tests::random_map;
    use candle_core::{Device, Var};

    fn sandwich(dtype: DType) -> (ParamStore, ScaleAdaptation) {
        let mut store = ParamStore::new(3, dtype);
        let sa = ScaleAdaptation::new(&mut store.root().pp("scale"), &ScaleConfig::default()).unwrap();
        (store, sa)
    }

    #[test]
    fn factor_is_in_range_and_deterministic() {
        let (_store, sa) = sandwich(DType::F64);
        let x = random_map((2, 64, 80, 3), 0);
        let a = sa.estimate_resize_factor(&x).unwrap();
        let b = sa.estimate_resize_factor(&x).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|m| (0.5..=1.0).contains(&m.value())));
    }

    #[test]
    fn saturated_head_gives_unit_factor() {
        let (store, sa) = sandwich(DType::F64);
        store
            .set("scale.rpn.head.bias", &Tensor::new(&[1e3f64], &Device::Cpu).unwrap())
            .unwrap();
        let m = sa.estimate_resize_factor(&random_map((1, 64, 64, 3), 1)).unwrap();
        assert!((m[0].value() - 1.0).abs() <= 1e-6);
        store
            .set("scale.rpn.head.bias", &Tensor::new(&[-1e3f64], &Device::Cpu).unwrap())
            .unwrap();
        let m = sa.estimate_resize_factor(&random_map((1, 64, 64, 3), 1)).unwrap();
        assert!((m[0].value() - 0.5).abs() <= 1e-6);
    }

    #[test]
    fn near_unit_factor_bypasses() {
        let (_store, sa) = sandwich(DType::F64);
        let x = random_map((1, 96, 72, 3), 2);
        let (y, applied) = sa.maybe_rescale(&x, ResizeFactor::new(0.999, 0.5).unwrap()).unwrap();
        assert!(!applied);
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn rescale_edges_follow_rounding_and_floor() {
        let (_store, sa) = sandwich(DType::F64);
        let x = random_map((1, 100, 256, 3), 3);
        let (y, applied) = sa.maybe_rescale(&x, ResizeFactor::new(0.9, 0.5).unwrap()).unwrap();
        assert!(applied);
        assert_eq!(y.dims(), &[1, 90, 230, 3]);
        let (y, _) = sa.maybe_rescale(&x, ResizeFactor::new(0.5, 0.5).unwrap()).unwrap();
        assert_eq!(y.dims(), &[1, 64, 128, 3]);
        let up = sa
            .upscale(&y, ResizeFactor::new(0.5, 0.5).unwrap(), (100, 256))
            .unwrap();
        assert_eq!(up.dims(), &[1, 100, 256, 3]);
    }

    #[test]
    fn train_path_matches_inference_path() {
        let (_store, sa) = sandwich(DType::F64);
        let x = random_map((1, 80, 70, 3), 4);
        let m = ResizeFactor::new(0.77, 0.5).unwrap();
        let a = sa.downscale(&x, m).unwrap();
        let b = sa
            .downscale_train(&x, &Tensor::new(0.77f64, &Device::Cpu).unwrap())
            .unwrap();
        let d = (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(d <= 1e-12);
    }

    #[test]
    fn factor_receives_gradient_through_the_grid() {
        let (_store, sa) = sandwich(DType::F64);
        let x = random_map((1, 72, 72, 3), 5);
        let m = Var::new(0.8f64, &Device::Cpu).unwrap();
        let small = sa.downscale_train(&x, m.as_tensor()).unwrap();
        let loss = sa
            .upscale_train(&small, m.as_tensor(), (72, 72))
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap();
        let g = loss.backward().unwrap();
        let dm = g.get(m.as_tensor()).unwrap().to_scalar::<f64>().unwrap();
        assert!(dm.is_finite() && dm != 0.0);
    }
}
