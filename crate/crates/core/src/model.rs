//! The full codec: transforms, entropy models and the scale-adaptation
//! sandwich over one parameter store.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::Rng;

use crate::coder::pad::{crop, pad_input};
use crate::config::ModelConfig;
use crate::entropy::{total_rate, Charm, FactorizedPrior, QuantMode};
use crate::error::{Error, Result};
use crate::params::{read_metadata, ParamStore};
use crate::scale::{ResizeFactor, ScaleAdaptation};
use crate::transforms::{Analysis, HyperAnalysis, HyperSynthesis, Synthesis};

/// Rate-distortion trade-offs of the quality ladder; index = quality id.
pub const LAMBDAS: [f64; 4] = [1000e-5, 200e-5, 20e-5, 3e-5];

pub fn lambda_for_quality(quality_id: u8) -> Result<f64> {
    LAMBDAS
        .get(quality_id as usize)
        .copied()
        .ok_or_else(|| Error::Input(format!("quality id {quality_id} outside 0..{}", LAMBDAS.len())))
}

/// Result of a differentiable pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Unclipped reconstruction at the input resolution.
    pub x_hat: Tensor,
    /// Scalar sums over the batch.
    pub bits_y: Tensor,
    pub bits_z: Tensor,
    /// Estimated resize factor per image (1 when adaptation is off).
    pub factors: Vec<f64>,
    pub applied: Vec<bool>,
}

pub struct AictModel {
    store: ParamStore,
    cfg: ModelConfig,
    pub analysis: Analysis,
    pub synthesis: Synthesis,
    pub hyper_analysis: HyperAnalysis,
    pub hyper_synthesis: HyperSynthesis,
    pub prior: FactorizedPrior,
    pub charm: Charm,
    pub scale: ScaleAdaptation,
    quality_id: u8,
    lambda: f64,
}

impl AictModel {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let mut root = store.root();
        let analysis = Analysis::new(&mut root.pp("g_a"), &cfg)?;
        let synthesis = Synthesis::new(&mut root.pp("g_s"), &cfg)?;
        let hyper_analysis = HyperAnalysis::new(&mut root.pp("h_a"), &cfg)?;
        let hyper_synthesis = HyperSynthesis::new(&mut root.pp("h_s"), &cfg)?;
        let prior = FactorizedPrior::new(&mut root.pp("prior"), cfg.hyper_latent_channels)?;
        let charm = Charm::new(&mut root.pp("charm"), &cfg)?;
        let scale = ScaleAdaptation::new(&mut root.pp("scale"), &cfg.scale)?;
        Ok(Self {
            store,
            cfg,
            analysis,
            synthesis,
            hyper_analysis,
            hyper_synthesis,
            prior,
            charm,
            scale,
            quality_id: 0,
            lambda: LAMBDAS[0],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn quality_id(&self) -> u8 {
        self.quality_id
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_quality(&mut self, quality_id: u8, lambda: f64) {
        self.quality_id = quality_id;
        self.lambda = lambda;
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Differentiable pass with the whole sandwich in the loop. Images are
    /// processed one at a time because each has its own resize factor.
    pub fn forward<R: Rng>(&self, x: &Tensor, mode: QuantMode, adapt: bool, rng: &mut R) -> Result<ForwardOutput> {
        let (b, h, w, c) = x.dims4()?;
        if c != 3 {
            return Err(Error::Precondition(format!("expected 3 channels, got {c}")));
        }
        let x = x.to_dtype(self.dtype())?;
        let mut recon = Vec::with_capacity(b);
        let mut bits_y = Vec::with_capacity(b);
        let mut bits_z = Vec::with_capacity(b);
        let mut factors = Vec::with_capacity(b);
        let mut applied = Vec::with_capacity(b);
        for i in 0..b {
            let xi = x.narrow(0, i, 1)?;
            let mut m = None;
            let mut mv = 1.0;
            if adapt {
                let mt = self.scale.estimate(&xi)?.reshape(())?;
                mv = mt.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                if !mv.is_finite() {
                    return Err(Error::NonFinite("resize factor"));
                }
                let mq = ResizeFactor::new(mv.clamp(self.cfg.scale.m_min, 1.0), self.cfg.scale.m_min)?.quantized();
                if !self.scale.is_bypassed(mq) {
                    m = Some(mt);
                }
            }
            let x_d = match &m {
                Some(mt) => self.scale.downscale_train(&xi, mt)?,
                None => xi.clone(),
            };
            let (xp, size) = pad_input(&x_d)?;
            let y = self.analysis.forward(&xp)?;
            let z = self.hyper_analysis.forward(&y)?;
            let rate = total_rate(&y, &z, &self.hyper_synthesis, &self.prior, &self.charm, mode, rng)?;
            let x_hat_d = crop(&self.synthesis.forward(&rate.y_hat, false)?, size)?;
            let x_hat = match &m {
                Some(mt) => self.scale.upscale_train(&x_hat_d, mt, (h, w))?,
                None => x_hat_d,
            };
            recon.push(x_hat);
            bits_y.push(rate.bits_y);
            bits_z.push(rate.bits_z);
            factors.push(mv);
            applied.push(m.is_some());
        }
        Ok(ForwardOutput {
            x_hat: Tensor::cat(&recon, 0)?,
            bits_y: Tensor::stack(&bits_y, 0)?.sum_all()?,
            bits_z: Tensor::stack(&bits_z, 0)?.sum_all()?,
            factors,
            applied,
        })
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert("config".into(), self.cfg.name.clone());
        meta.insert("quality_id".into(), self.quality_id.to_string());
        meta.insert("lambda".into(), format!("{:e}", self.lambda));
        self.store.save(path, &meta)
    }

    /// Rebuild a model from a checkpoint; the architecture comes from its
    /// metadata. Returns the model and the full metadata.
    pub fn load(path: &Path, dtype: DType) -> Result<(Self, BTreeMap<String, String>)> {
        let meta = read_metadata(path)?;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata {k}", path.display())))
        };
        let cfg = ModelConfig::by_name(field("config")?)?;
        let quality_id: u8 = field("quality_id")?
            .parse()
            .map_err(|_| Error::Checkpoint("quality_id is not a small integer".into()))?;
        let lambda: f64 = field("lambda")?
            .parse()
            .map_err(|_| Error::Checkpoint("lambda is not a number".into()))?;
        let mut model = Self::new(cfg, 0, dtype)?;
        model.store.load(path)?;
        model.set_quality(quality_id, lambda);
        Ok((model, meta))
    }
}
