//! Nonlinear transforms: analysis `g_a` (image -> y, /16), synthesis `g_s`
//! (y_hat -> image, x16), hyper-analysis `h_a` (y -> z, /4) and
//! hyper-synthesis `h_s` (z_hat -> hyper features, x4).

pub mod patch;
pub mod swin;

use candle_core::Tensor;

pub use patch::{PatchExpand, PatchMerge};
pub use swin::SwinBlock;

use crate::config::{ModelConfig, SwinStageConfig};
use crate::error::{Error, Result};
use crate::params::Scope;

/// Spatial alignment the analysis transform requires of its input.
pub const INPUT_ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentRole {
    Y,
    Z,
    YHat,
    ZHat,
}

/// A latent together with the role it plays in the pipeline. Layout is
/// `(B, h, w, c)`.
#[derive(Debug, Clone)]
pub struct LatentTensor {
    pub data: Tensor,
    pub role: LatentRole,
}

impl LatentTensor {
    pub fn new(data: Tensor, role: LatentRole) -> Self {
        Self { data, role }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.role, LatentRole::YHat | LatentRole::ZHat)
    }
}

fn build_blocks(s: &mut Scope, cfg: &SwinStageConfig) -> Result<Vec<SwinBlock>> {
    (0..cfg.depth)
        .map(|j| SwinBlock::new(&mut s.pp(format!("block{j}")), cfg, j % 2 == 1))
        .collect()
}

fn run_blocks(blocks: &[SwinBlock], mut x: Tensor) -> Result<Tensor> {
    for b in blocks {
        x = b.forward(&x)?;
    }
    Ok(x)
}

fn blocks_flops(blocks: &[SwinBlock], h: usize, w: usize) -> u64 {
    blocks.iter().map(|b| b.flops(h, w)).sum()
}

#[derive(Debug, Clone)]
struct DownStage {
    merge: PatchMerge,
    blocks: Vec<SwinBlock>,
}

impl DownStage {
    fn new(s: &mut Scope, in_dim: usize, cfg: &SwinStageConfig) -> Result<Self> {
        Ok(Self {
            merge: PatchMerge::new(&mut s.pp("merge"), in_dim, cfg.embed_dim)?,
            blocks: build_blocks(s, cfg)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        run_blocks(&self.blocks, self.merge.forward(x)?)
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        self.merge.flops(h, w) + blocks_flops(&self.blocks, h.div_ceil(2), w.div_ceil(2))
    }
}

#[derive(Debug, Clone)]
struct UpStage {
    blocks: Vec<SwinBlock>,
    expand: PatchExpand,
}

impl UpStage {
    fn new(s: &mut Scope, cfg: &SwinStageConfig, out_dim: usize) -> Result<Self> {
        Ok(Self {
            blocks: build_blocks(s, cfg)?,
            expand: PatchExpand::new(&mut s.pp("expand"), cfg.embed_dim, out_dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.expand.forward(&run_blocks(&self.blocks, x.clone())?)
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        blocks_flops(&self.blocks, h, w) + self.expand.flops(h, w)
    }
}

/// `g_a`: four (patch merge -> SwinT blocks) stages.
#[derive(Debug, Clone)]
pub struct Analysis {
    stages: Vec<DownStage>,
}

impl Analysis {
    pub fn new(s: &mut Scope, cfg: &ModelConfig) -> Result<Self> {
        let mut in_dim = 3;
        let mut stages = Vec::new();
        for (i, st) in cfg.analysis.iter().enumerate() {
            stages.push(DownStage::new(&mut s.pp(format!("stage{i}")), in_dim, st)?);
            in_dim = st.embed_dim;
        }
        Ok(Self { stages })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w, c) = x.dims4()?;
        if c != 3 || h == 0 || w == 0 || h % INPUT_ALIGN != 0 || w % INPUT_ALIGN != 0 {
            return Err(Error::Precondition(format!(
                "analysis input must be Bx(64k)x(64l)x3, got {:?}",
                x.dims()
            )));
        }
        self.stages.iter().try_fold(x.clone(), |t, st| st.forward(&t))
    }

    pub fn flops(&self, mut h: usize, mut w: usize) -> u64 {
        let mut total = 0;
        for st in &self.stages {
            total += st.flops(h, w);
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        total
    }
}

/// `g_s`: mirror of [`Analysis`] with patch expanding.
#[derive(Debug, Clone)]
pub struct Synthesis {
    stages: Vec<UpStage>,
}

impl Synthesis {
    pub fn new(s: &mut Scope, cfg: &ModelConfig) -> Result<Self> {
        let mut stages = Vec::new();
        for i in (0..4).rev() {
            let out_dim = if i == 0 { 3 } else { cfg.analysis[i - 1].embed_dim };
            stages.push(UpStage::new(
                &mut s.pp(format!("stage{}", 3 - i)),
                &cfg.analysis[i],
                out_dim,
            )?);
        }
        Ok(Self { stages })
    }

    /// Clipping to `[0, 1]` is for evaluation; training runs unclipped so
    /// saturated pixels still carry gradient.
    pub fn forward(&self, y_hat: &Tensor, clip: bool) -> Result<Tensor> {
        let x = self.stages.iter().try_fold(y_hat.clone(), |t, st| st.forward(&t))?;
        if clip {
            Ok(x.clamp(0.0, 1.0)?)
        } else {
            Ok(x)
        }
    }

    pub fn flops(&self, mut h: usize, mut w: usize) -> u64 {
        let mut total = 0;
        for st in &self.stages {
            total += st.flops(h, w);
            h *= 2;
            w *= 2;
        }
        total
    }
}

/// `h_a`: two (patch merge -> SwinT blocks) stages, y -> z.
#[derive(Debug, Clone)]
pub struct HyperAnalysis {
    stages: Vec<DownStage>,
}

impl HyperAnalysis {
    pub fn new(s: &mut Scope, cfg: &ModelConfig) -> Result<Self> {
        let mut in_dim = cfg.latent_channels;
        let mut stages = Vec::new();
        for (i, st) in cfg.hyper.iter().enumerate() {
            stages.push(DownStage::new(&mut s.pp(format!("stage{i}")), in_dim, st)?);
            in_dim = st.embed_dim;
        }
        Ok(Self { stages })
    }

    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        self.stages.iter().try_fold(y.clone(), |t, st| st.forward(&t))
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.stages[0].flops(h, w) + self.stages[1].flops(h.div_ceil(2), w.div_ceil(2))
    }
}

/// `h_s`: z_hat -> hyper features with `C_h` channels at the resolution of y.
#[derive(Debug, Clone)]
pub struct HyperSynthesis {
    stages: Vec<UpStage>,
}

impl HyperSynthesis {
    pub fn new(s: &mut Scope, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            stages: vec![
                UpStage::new(&mut s.pp("stage0"), &cfg.hyper[1], cfg.hyper[0].embed_dim)?,
                UpStage::new(&mut s.pp("stage1"), &cfg.hyper[0], cfg.hyper_feature_channels)?,
            ],
        })
    }

    pub fn forward(&self, z_hat: &Tensor) -> Result<Tensor> {
        self.stages.iter().try_fold(z_hat.clone(), |t, st| st.forward(&t))
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.stages[0].flops(h, w) + self.stages[1].flops(2 * h, 2 * w)
    }
}
