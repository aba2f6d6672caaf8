//! Rate-distortion training: loss, schedule, data sampling, Adam and the
//! resumable training loop.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{backprop::GradStore, DType, Device, Tensor};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::entropy::QuantMode;
use crate::error::{Error, Result};
use crate::image_io::read_rgb;
use crate::model::{lambda_for_quality, AictModel};
use crate::params::{load_tensors, save_tensors, ParamStore};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: [&str; 5] = ["step", "loss", "d_mse", "r_bpp", "lr"];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Architecture preset: `tiny`, `base` or `micro`.
    pub model: String,
    pub quality_id: u8,
    pub lambda: f64,
    pub total_steps: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub final_phase_fraction: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub quant: QuantMode,
    /// Train the resize-factor estimator and sandwich jointly.
    pub adapt: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: "tiny".into(),
            quality_id: 0,
            lambda: crate::model::LAMBDAS[0],
            total_steps: 50_000,
            lr_initial: 1e-4,
            lr_final: 1e-5,
            final_phase_fraction: 0.1,
            batch_size: 8,
            crop: 256,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            log_every: 10,
            checkpoint_every: 1000,
            quant: QuantMode::Round,
            adapt: true,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

impl TrainConfig {
    /// Parse `key = value` lines; `#` starts a comment. Unknown keys are
    /// rejected. Setting `quality_id` without `lambda` picks the ladder
    /// value.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut lambda_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "model" => cfg.model = v.to_string(),
                "quality_id" => cfg.quality_id = parse_value(k, v)?,
                "lambda" => {
                    cfg.lambda = parse_value(k, v)?;
                    lambda_set = true;
                }
                "total_steps" => cfg.total_steps = parse_value(k, v)?,
                "lr_initial" => cfg.lr_initial = parse_value(k, v)?,
                "lr_final" => cfg.lr_final = parse_value(k, v)?,
                "final_phase_fraction" => cfg.final_phase_fraction = parse_value(k, v)?,
                "batch_size" => cfg.batch_size = parse_value(k, v)?,
                "crop" => cfg.crop = parse_value(k, v)?,
                "adam_beta1" => cfg.adam_beta1 = parse_value(k, v)?,
                "adam_beta2" => cfg.adam_beta2 = parse_value(k, v)?,
                "adam_eps" => cfg.adam_eps = parse_value(k, v)?,
                "grad_clip" => cfg.grad_clip = parse_value(k, v)?,
                "seed" => cfg.seed = parse_value(k, v)?,
                "log_every" => cfg.log_every = parse_value(k, v)?,
                "checkpoint_every" => cfg.checkpoint_every = parse_value(k, v)?,
                "adapt" => cfg.adapt = parse_value(k, v)?,
                "quant" => {
                    cfg.quant = match v {
                        "noise" => QuantMode::Noise,
                        "round" => QuantMode::Round,
                        _ => return Err(Error::Config(format!("quant must be noise or round, got {v:?}"))),
                    }
                }
                _ => return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1))),
            }
        }
        if !lambda_set {
            cfg.lambda = lambda_for_quality(cfg.quality_id)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be positive");
        }
        if self.total_steps < 1 {
            return bad("total_steps must be at least 1");
        }
        if self.batch_size < 1 || self.crop < 64 {
            return bad("batch_size must be >= 1 and crop >= 64");
        }
        if !(0.0..=1.0).contains(&self.final_phase_fraction) {
            return bad("final_phase_fraction must be in [0, 1]");
        }
        if self.log_every < 1 || self.checkpoint_every < 1 {
            return bad("log_every and checkpoint_every must be >= 1");
        }
        Ok(())
    }
}

/// Loss components of one step, as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RDLossBreakdown {
    pub d_mse: f64,
    pub r_bpp: f64,
    pub total: f64,
}

/// `L = D + lambda * R` with D the MSE on `[0, 1]` RGB and R the rate in
/// bits per pixel of the `h x w` originals. Bit counts are batch sums.
pub fn rd_loss(
    x: &Tensor,
    x_hat: &Tensor,
    bits_y: &Tensor,
    bits_z: &Tensor,
    lambda: f64,
    h: usize,
    w: usize,
) -> Result<(Tensor, RDLossBreakdown)> {
    if x.dims() != x_hat.dims() {
        return Err(Error::Precondition(format!(
            "shape mismatch: {:?} vs {:?}",
            x.dims(),
            x_hat.dims()
        )));
    }
    let b = x.dim(0)?;
    let d = (x - x_hat)?.sqr()?.mean_all()?;
    let r = ((bits_y + bits_z)? / (b * h * w) as f64)?;
    let total = (&d + (&r * lambda)?)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let (dv, rv) = (scalar(&d)?, scalar(&r)?);
    Ok((
        total,
        RDLossBreakdown {
            d_mse: dv,
            r_bpp: rv,
            total: dv + lambda * rv,
        },
    ))
}

/// Piecewise-constant learning rate: `lr_initial`, then `lr_final` for the
/// last `final_phase_fraction` of the run.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let switch = ((1.0 - cfg.final_phase_fraction) * cfg.total_steps as f64).round() as usize;
    if step < switch {
        cfg.lr_initial
    } else {
        cfg.lr_final
    }
}

/// Training images held in memory.
pub struct ImageFolder {
    images: Vec<(PathBuf, RgbImage)>,
}

impl ImageFolder {
    /// Load every PNG under `dir` (sorted by name), skipping images with an
    /// edge shorter than `min_edge`.
    pub fn open(dir: &Path, min_edge: usize) -> Result<Self> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
            })
            .collect();
        paths.sort();
        let mut images = Vec::new();
        for p in paths {
            let img = match read_rgb(&p) {
                Ok(img) => img,
                Err(e) => {
                    log::warn!("skipping unreadable {}: {e}", p.display());
                    continue;
                }
            };
            let (w, h) = img.dimensions();
            if (w as usize) < min_edge || (h as usize) < min_edge {
                log::warn!("skipping {} ({w}x{h}): smaller than {min_edge}", p.display());
                continue;
            }
            images.push((p, img));
        }
        if images.is_empty() {
            return Err(Error::Input(format!(
                "no usable PNG images of at least {min_edge}px in {}",
                dir.display()
            )));
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &RgbImage {
        &self.images[i].1
    }

    pub fn path(&self, i: usize) -> &Path {
        &self.images[i].0
    }
}

/// Where one crop of a batch came from: image index and top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropOrigin {
    pub image: usize,
    pub top: usize,
    pub left: usize,
}

/// `batch_size` uniformly placed `crop x crop` crops in `[0, 1]`, as
/// `(B, crop, crop, 3)` f32.
pub fn sample_batch<R: Rng>(data: &ImageFolder, cfg: &TrainConfig, rng: &mut R) -> Result<(Tensor, Vec<CropOrigin>)> {
    let c = cfg.crop;
    let mut values = Vec::with_capacity(cfg.batch_size * c * c * 3);
    let mut origins = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let image = rng.random_range(0..data.len());
        let img = data.image(image);
        let (w, h) = (img.width() as usize, img.height() as usize);
        let top = rng.random_range(0..=h - c);
        let left = rng.random_range(0..=w - c);
        for yy in top..top + c {
            let row = &img.as_raw()[(yy * w + left) * 3..(yy * w + left + c) * 3];
            values.extend(row.iter().map(|&v| v as f32 / 255.0));
        }
        origins.push(CropOrigin { image, top, left });
    }
    let t = Tensor::from_vec(values, (cfg.batch_size, c, c, 3), &Device::Cpu)?;
    Ok((t, origins))
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: u64,
}

/// Adam with bias correction, keyed by parameter name so its state can be
/// checkpointed next to the weights.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            state: HashMap::new(),
        }
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64, scale: f64) -> Result<()> {
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g * scale)?;
            let st = match self.state.get_mut(name) {
                Some(st) => st,
                None => {
                    let z = var.as_tensor().zeros_like()?;
                    self.state.entry(name.clone()).or_insert(Moments {
                        m: z.clone(),
                        v: z,
                        t: 0,
                    })
                }
            };
            st.t += 1;
            st.m = ((&st.m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            st.v = ((&st.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let bc1 = 1.0 - self.beta1.powi(st.t as i32);
            let bc2 = 1.0 - self.beta2.powi(st.t as i32);
            let denom = ((&st.v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&st.m / bc1)?.div(&denom)? * lr)?;
            var.set(&(var.as_tensor() - update)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, step: usize) -> Result<()> {
        let mut names: Vec<&String> = self.state.keys().collect();
        names.sort();
        let mut owned = Vec::new();
        for n in &names {
            let st = &self.state[*n];
            owned.push((format!("m.{n}"), st.m.clone()));
            owned.push((format!("v.{n}"), st.v.clone()));
            owned.push((format!("t.{n}"), Tensor::new(&[st.t as f64], st.m.device())?));
        }
        let refs: Vec<(&str, &Tensor)> = owned.iter().map(|(k, t)| (k.as_str(), t)).collect();
        let mut meta = BTreeMap::new();
        meta.insert("step".to_string(), step.to_string());
        save_tensors(path, refs, &meta)
    }

    /// Restore state; returns the step the state was saved at.
    pub fn load(&mut self, path: &Path, store: &ParamStore) -> Result<usize> {
        let (tensors, meta) = load_tensors(path, store.device())?;
        let step = meta
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing step", path.display())))?;
        self.state.clear();
        for (name, var) in store.vars() {
            let (Some(m), Some(v), Some(t)) = (
                tensors.get(&format!("m.{name}")),
                tensors.get(&format!("v.{name}")),
                tensors.get(&format!("t.{name}")),
            ) else {
                continue;
            };
            if m.dims() != var.dims() || v.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state for {name} has the wrong shape"
                )));
            }
            let t = t.to_dtype(DType::F64)?.to_vec1::<f64>()?[0] as u64;
            self.state.insert(
                name.clone(),
                Moments {
                    m: m.to_dtype(store.dtype())?,
                    v: v.to_dtype(store.dtype())?,
                    t,
                },
            );
        }
        Ok(step)
    }
}

/// Factor that brings the global gradient norm down to `max_norm`, and the
/// norm itself.
pub fn clip_factor(store: &ParamStore, grads: &GradStore, max_norm: f64) -> Result<(f64, f64)> {
    let mut sq = 0.0;
    for (_, var) in store.vars() {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    let factor = if norm > max_norm { max_norm / (norm + 1e-6) } else { 1.0 };
    Ok((factor, norm))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub d_mse: f64,
    pub r_bpp: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Step the run started from (non-zero after a resume).
    pub start_step: usize,
    pub records: Vec<StepRecord>,
    pub checkpoint: PathBuf,
}

/// Per-step generator; a run resumed at `step` sees the same stream as an
/// uninterrupted one.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

fn read_metrics(path: &Path, before: usize) -> Result<Vec<StepRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("{}: malformed row", path.display())))
        };
        let step = f(0)? as usize;
        if step < before {
            out.push(StepRecord {
                step,
                loss: f(1)?,
                d_mse: f(2)?,
                r_bpp: f(3)?,
                lr: f(4)?,
            });
        }
    }
    Ok(out)
}

fn write_metrics(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            format!("{:e}", r.loss),
            format!("{:e}", r.d_mse),
            format!("{:e}", r.r_bpp),
            format!("{:e}", r.lr),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn batch_stats(x: &Tensor) -> String {
    let f = |t: candle_core::Result<Tensor>| {
        t.and_then(|t| t.to_dtype(DType::F64)?.to_scalar::<f64>())
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|_| "?".into())
    };
    format!(
        "batch {:?} min {} max {} mean {}",
        x.dims(),
        f(x.min_all()),
        f(x.max_all()),
        f(x.mean_all())
    )
}

/// Train `model` on PNGs under `data_dir`, writing checkpoints and the
/// metrics log to `out_dir`. If `out_dir` already holds a checkpoint and
/// optimizer state, training resumes from them.
pub fn train(model: &mut AictModel, cfg: &TrainConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainReport> {
    train_until(model, cfg, data_dir, out_dir, cfg.total_steps)
}

/// Like [`train`] but stops (after checkpointing) once `stop_at` steps are
/// done, so a long run can be split across sessions. The schedule still
/// follows `cfg.total_steps`.
pub fn train_until(
    model: &mut AictModel,
    cfg: &TrainConfig,
    data_dir: &Path,
    out_dir: &Path,
    stop_at: usize,
) -> Result<TrainReport> {
    cfg.validate()?;
    let stop_at = stop_at.min(cfg.total_steps);
    if model.config().name != cfg.model {
        return Err(Error::Config(format!(
            "config asks for model {:?} but got {:?}",
            cfg.model,
            model.config().name
        )));
    }
    model.set_quality(cfg.quality_id, cfg.lambda);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let data = ImageFolder::open(data_dir, cfg.crop)?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let opt_path = out_dir.join(OPTIMIZER_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);

    let mut adam = Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut start_step = 0;
    let mut records = Vec::new();
    if ckpt.exists() && opt_path.exists() {
        model.store().load(&ckpt)?;
        start_step = adam.load(&opt_path, model.store())?;
        if metrics_path.exists() {
            records = read_metrics(&metrics_path, start_step)?;
        }
        log::info!("resuming from step {start_step}");
    }
    let save = |model: &AictModel, adam: &Adam, step: usize, records: &[StepRecord]| -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("step".to_string(), step.to_string());
        model.save(&ckpt, &meta)?;
        adam.save(&opt_path, step)?;
        write_metrics(&metrics_path, records)
    };

    let (h, w) = (cfg.crop, cfg.crop);
    for step in start_step..stop_at {
        let lr = lr_schedule(step, cfg);
        let mut rng = step_rng(cfg.seed, step);
        let (x, _) = sample_batch(&data, cfg, &mut rng)?;
        let x = x.to_dtype(model.dtype())?;
        let out = model.forward(&x, cfg.quant, cfg.adapt, &mut rng)?;
        let (loss, br) = rd_loss(&x, &out.x_hat, &out.bits_y, &out.bits_z, cfg.lambda, h, w)?;
        if !br.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "loss {} (d_mse {}, r_bpp {}); {}; factors {:?}",
                    br.total,
                    br.d_mse,
                    br.r_bpp,
                    batch_stats(&x),
                    out.factors
                ),
            });
        }
        let grads = loss.backward()?;
        let (scale, _) = clip_factor(model.store(), &grads, cfg.grad_clip)?;
        adam.step(model.store(), &grads, lr, scale)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.total_steps {
            log::info!(
                "step {step} loss {:.5} d_mse {:.5} bpp {:.4} lr {lr:e}",
                br.total,
                br.d_mse,
                br.r_bpp
            );
            records.push(StepRecord {
                step,
                loss: br.total,
                d_mse: br.d_mse,
                r_bpp: br.r_bpp,
                lr,
            });
        }
        if (step + 1) % cfg.checkpoint_every == 0 && step + 1 < stop_at {
            save(model, &adam, step + 1, &records)?;
        }
    }
    save(model, &adam, stop_at.max(start_step), &records)?;
    Ok(TrainReport {
        start_step,
        records,
        checkpoint: ckpt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let cfg =
            TrainConfig::parse("model = micro\nquality_id = 3 # lowest rate\ntotal_steps=10\n\nseed = 7\n").unwrap();
        assert_eq!(cfg.model, "micro");
        assert_eq!(cfg.lambda, 3e-5);
        assert_eq!(cfg.total_steps, 10);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.batch_size, 8);
        assert!(TrainConfig::parse("lambda = -1").is_err());
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("total_steps = 0").is_err());
        assert!(TrainConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn schedule_switches_for_the_final_tenth() {
        let mut cfg = TrainConfig {
            total_steps: 2_000_000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(1_799_999, &cfg), 1e-4);
        assert_eq!(lr_schedule(1_800_000, &cfg), 1e-5);
        cfg.total_steps = 1000;
        assert_eq!(lr_schedule(950, &cfg), 1e-5);
        let lrs: Vec<f64> = (0..1000).map(|s| lr_schedule(s, &cfg)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn loss_examples() {
        let dev = Device::Cpu;
        let x = Tensor::full(0.5f64, (1, 4, 4, 3), &dev).unwrap();
        let zero = Tensor::new(0.0f64, &dev).unwrap();
        let bits = Tensor::new(16.0f64, &dev).unwrap();
        let (_, b) = rd_loss(&x, &x, &bits, &zero, 0.01, 4, 4).unwrap();
        assert_eq!(b.d_mse, 0.0);
        assert!((b.total - 0.01).abs() < 1e-15);
        let x_hat = (&x + 0.1).unwrap();
        let (t, b) = rd_loss(&x, &x_hat, &zero, &zero, 0.01, 4, 4).unwrap();
        assert!((b.total - 0.01).abs() < 1e-12);
        assert!((t.to_scalar::<f64>().unwrap() - b.total).abs() < 1e-15);
        let (_, b) = rd_loss(&x, &x_hat, &bits, &zero, 0.01, 4, 4).unwrap();
        assert!((b.total - 0.02).abs() < 1e-12);
        assert_eq!(b.total, b.d_mse + 0.01 * b.r_bpp);
    }

    #[test]
    fn step_streams_are_independent_of_history() {
        let a: u64 = step_rng(5, 17).random();
        let mut r = step_rng(5, 16);
        let _: u64 = r.random();
        let b: u64 = step_rng(5, 17).random();
        assert_eq!(a, b);
        assert_ne!(a, step_rng(5, 18).random::<u64>());
    }
}
