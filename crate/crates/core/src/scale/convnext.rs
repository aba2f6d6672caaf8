//! ConvNeXt blocks and the pre/post-processor built from them.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::layers::{gelu, to_nchw, to_nhwc, Conv2d, LayerNorm, Linear};
use crate::params::{Init, Scope};

const EXPANSION: usize = 4;
const LAYER_SCALE_INIT: f64 = 1e-6;

/// Depthwise 7x7 conv -> LayerNorm -> pointwise x4 -> GELU -> pointwise ->
/// layer scale, with a residual connection. NHWC in and out.
#[derive(Debug, Clone)]
pub struct ConvNextBlock {
    dwconv: Conv2d,
    norm: LayerNorm,
    pw1: Linear,
    pw2: Linear,
    gamma: Tensor,
    dim: usize,
}

impl ConvNextBlock {
    pub fn new(s: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            dwconv: Conv2d::new(&mut s.pp("dwconv"), dim, dim, 7, 1, dim)?,
            norm: LayerNorm::new(&mut s.pp("norm"), dim)?,
            pw1: Linear::new(&mut s.pp("pwconv1"), dim, EXPANSION * dim, true)?,
            pw2: Linear::new(&mut s.pp("pwconv2"), EXPANSION * dim, dim, true)?,
            gamma: s.param("gamma", &[dim], Init::Const(LAYER_SCALE_INIT))?,
            dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = to_nhwc(&self.dwconv.forward(&to_nchw(x)?)?)?;
        let h = self.pw2.forward(&gelu(&self.pw1.forward(&self.norm.forward(&h)?)?)?)?;
        Ok((x + h.broadcast_mul(&self.gamma)?)?)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let px = (h * w) as u64;
        let d = self.dim as u64;
        2 * px * d * 49 + 2 * 2 * px * d * EXPANSION as u64 * d
    }
}

/// `proj(concat(x, ConvNeXt^3(x)))`, mapping back to the input channels.
/// The projection starts as `[I | 0]`, i.e. an exact pass-through of `x`.
#[derive(Debug, Clone)]
pub struct Processor {
    blocks: Vec<ConvNextBlock>,
    proj: Linear,
    channels: usize,
}

impl Processor {
    pub fn new(s: &mut Scope, channels: usize, num_blocks: usize) -> Result<Self> {
        let blocks = (0..num_blocks)
            .map(|i| ConvNextBlock::new(&mut s.pp(format!("block{i}")), channels))
            .collect::<Result<Vec<_>>>()?;
        let init: Vec<f64> = (0..channels)
            .flat_map(|r| (0..2 * channels).map(move |c| if c == r { 1.0 } else { 0.0 }))
            .collect();
        let proj = Linear::with_init(&mut s.pp("proj"), 2 * channels, channels, true, Init::Values(init))?;
        Ok(Self { blocks, proj, channels })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(3)?;
        if c != self.channels {
            return Err(Error::Config(format!(
                "processor expects {} channels, got {c}",
                self.channels
            )));
        }
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        self.proj.forward(&Tensor::cat(&[x, &h], 3)?)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.blocks.iter().map(|b| b.flops(h, w)).sum::<u64>()
            + 2 * (h * w * self.proj.in_dim() * self.proj.out_dim()) as u64
    }
}
