//! Model configurations.
//!
//! `tiny` is the desk-scale configuration used by tests and the training
//! smoke runs. `base` is a reconstruction sized to land near a 37M-parameter
//! codec; its depths and widths are not published values. `micro` exists for
//! finite-difference gradient checks where every width is at most 8.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwinStageConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub window_size: usize,
    pub num_heads: usize,
}

impl SwinStageConfig {
    pub const fn new(depth: usize, embed_dim: usize, window_size: usize, num_heads: usize) -> Self {
        Self {
            depth,
            embed_dim,
            window_size,
            num_heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.embed_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config(format!("degenerate stage {self:?}")));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.window_size < 2 {
            return Err(Error::Config(format!(
                "window_size {} must be at least 2",
                self.window_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CharmConfig {
    pub num_slices: usize,
    /// SwinT blocks per slice transform.
    pub depth: usize,
    pub num_heads: usize,
    pub window_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleConfig {
    pub rpn_widths: [usize; 3],
    pub convnext_blocks: usize,
    pub m_min: f64,
    pub eps_skip: f64,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self {
            rpn_widths: [16, 32, 64],
            convnext_blocks: 3,
            m_min: 0.5,
            eps_skip: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub analysis: [SwinStageConfig; 4],
    pub hyper: [SwinStageConfig; 2],
    /// C_y
    pub latent_channels: usize,
    /// C_z
    pub hyper_latent_channels: usize,
    /// C_h, channels of the hyper-synthesis output fed to the slice transforms.
    pub hyper_feature_channels: usize,
    pub charm: CharmConfig,
    pub scale: ScaleConfig,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        let dims = [32, 48, 64, 96];
        let heads = [2, 3, 4, 6];
        Self {
            name: "tiny".into(),
            analysis: std::array::from_fn(|i| SwinStageConfig::new(1, dims[i], 4, heads[i])),
            hyper: [SwinStageConfig::new(1, 64, 4, 4); 2],
            latent_channels: 96,
            hyper_latent_channels: 64,
            hyper_feature_channels: 128,
            charm: CharmConfig {
                num_slices: 4,
                depth: 2,
                num_heads: 3,
                window_size: 4,
            },
            scale: ScaleConfig::default(),
        }
    }

    pub fn base() -> Self {
        let dims = [128, 192, 256, 320];
        let depths = [2, 2, 6, 2];
        let heads = [4, 6, 8, 10];
        Self {
            name: "base".into(),
            analysis: std::array::from_fn(|i| SwinStageConfig::new(depths[i], dims[i], 8, heads[i])),
            hyper: [SwinStageConfig::new(2, 192, 4, 6); 2],
            latent_channels: 320,
            hyper_latent_channels: 192,
            hyper_feature_channels: 640,
            charm: CharmConfig {
                num_slices: 10,
                depth: 2,
                num_heads: 4,
                window_size: 8,
            },
            scale: ScaleConfig::default(),
        }
    }

    pub fn micro() -> Self {
        Self {
            name: "micro".into(),
            analysis: [SwinStageConfig::new(1, 8, 2, 2); 4],
            hyper: [SwinStageConfig::new(1, 8, 2, 2); 2],
            latent_channels: 8,
            hyper_latent_channels: 8,
            hyper_feature_channels: 8,
            charm: CharmConfig {
                num_slices: 2,
                depth: 2,
                num_heads: 2,
                window_size: 2,
            },
            scale: ScaleConfig {
                rpn_widths: [4, 4, 4],
                ..ScaleConfig::default()
            },
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "base" => Ok(Self::base()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::Config(format!("unknown model config {other:?}"))),
        }
    }

    pub fn slice_channels(&self) -> usize {
        self.latent_channels / self.charm.num_slices
    }

    pub fn validate(&self) -> Result<()> {
        for s in self.analysis.iter().chain(self.hyper.iter()) {
            s.validate()?;
        }
        if self.analysis[3].embed_dim != self.latent_channels {
            return Err(Error::Config("last analysis stage width must equal C_y".into()));
        }
        if self.hyper[1].embed_dim != self.hyper_latent_channels {
            return Err(Error::Config("last hyper-analysis stage width must equal C_z".into()));
        }
        let c = &self.charm;
        if c.num_slices == 0 || self.latent_channels % c.num_slices != 0 {
            return Err(Error::Config(format!(
                "{} slices do not divide C_y = {}",
                c.num_slices, self.latent_channels
            )));
        }
        SwinStageConfig::new(c.depth, 2 * self.slice_channels(), c.window_size, c.num_heads).validate()?;
        let sc = &self.scale;
        if !(sc.m_min > 0.0 && sc.m_min <= 1.0) {
            return Err(Error::Config(format!("M_min {} outside (0, 1]", sc.m_min)));
        }
        Ok(())
    }
}
