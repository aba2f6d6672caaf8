//! End-to-end encode / decode of one image.

use std::collections::HashMap;

use candle_core::{DType, Tensor};

use super::cdf::{fixed_point, gaussian_pmf, CdfTable, DEFAULT_PRECISION, SYMBOL_HI, SYMBOL_LO};
use super::container::{Bitstream, FLAG_ADAPTED};
use super::pad::{crop, pad_input};
use super::range::{RangeDecoder, RangeEncoder};
use crate::entropy::{concat_slices, round_half_away, split_slices, SIGMA_MIN};
use crate::error::{Error, Result};
use crate::model::AictModel;
use crate::scale::{ResizeFactor, MIN_EDGE};

#[derive(Debug, Clone, Copy)]
pub struct EncodeOptions {
    /// Run the resize-factor estimator; when false the image is coded at
    /// its own resolution.
    pub adapt: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self { adapt: true }
    }
}

/// Encoder-side by-products, mainly for tests and reporting.
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    pub y_hat: Tensor,
    pub z_hat: Tensor,
    /// What the decoder will reconstruct, in `[0, 1]`.
    pub reconstruction: Tensor,
    /// `sum -log2 p` of the coded y symbols, with `p` the real-valued
    /// probabilities the integer tables are rounded from.
    pub estimated_y_bits: f64,
    pub estimated_z_bits: f64,
    /// Residuals outside the symbol range that were clamped.
    pub clipped: usize,
    pub factor: ResizeFactor,
}

#[derive(Debug, Clone)]
pub struct DecodeTrace {
    pub y_hat: Tensor,
    pub z_hat: Tensor,
}

/// FNV-1a over the bit patterns of a latent, for cheap equality checks.
pub fn latent_checksum(t: &Tensor) -> Result<u64> {
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in v {
        for b in x.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    Ok(h)
}

/// A coding table with the pmf it was rounded from.
struct Model {
    table: CdfTable,
    pmf: Vec<f64>,
}

impl Model {
    fn new(pmf: Vec<f64>) -> Result<Self> {
        Ok(Self {
            table: CdfTable::from_pmf(&pmf, SYMBOL_LO, DEFAULT_PRECISION)?,
            pmf,
        })
    }

    fn bits(&self, s: i32) -> f64 {
        -self.pmf[(s - SYMBOL_LO) as usize].log2()
    }
}

fn z_models(model: &AictModel) -> Result<Vec<Model>> {
    (0..model.prior.channels())
        .map(|c| Model::new(model.prior.channel_model(c)?.pmf(SYMBOL_LO, SYMBOL_HI)))
        .collect()
}

/// Zero-mean residual tables keyed by the fixed-point scale.
#[derive(Default)]
struct GaussianTables {
    cache: HashMap<u64, Model>,
}

impl GaussianTables {
    fn get(&mut self, sigma_q: f64) -> Result<&Model> {
        let key = sigma_q.to_bits();
        if !self.cache.contains_key(&key) {
            let m = Model::new(gaussian_pmf(0.0, sigma_q, SYMBOL_LO, SYMBOL_HI)?)?;
            self.cache.insert(key, m);
        }
        Ok(&self.cache[&key])
    }
}

fn host(t: &Tensor) -> Result<Vec<f64>> {
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("entropy parameters"));
    }
    Ok(v)
}

/// Fixed-point `(mu, sigma)` exactly as both sides use them.
fn coding_params(mu: f64, sigma: f64) -> (f64, f64) {
    (fixed_point(mu), fixed_point(sigma.max(SIGMA_MIN)))
}

fn check_size(size: (usize, usize)) -> Result<()> {
    if size.0 < MIN_EDGE || size.1 < MIN_EDGE {
        return Err(Error::Input(format!(
            "image is {}x{}; both edges must be at least {MIN_EDGE}",
            size.0, size.1
        )));
    }
    Ok(())
}

/// Encode an NHWC image with values in `[0, 1]` (batch of one).
pub fn encode_image(model: &AictModel, x: &Tensor, options: EncodeOptions) -> Result<(Bitstream, EncodeTrace)> {
    let (b, h, w, c) = x.dims4()?;
    if b != 1 || c != 3 {
        return Err(Error::Input(format!("expected one RGB image, got {:?}", x.dims())));
    }
    check_size((h, w))?;
    let x = x.to_dtype(model.dtype())?;
    let factor = if options.adapt {
        model.scale.estimate_resize_factor(&x)?[0].quantized()
    } else {
        ResizeFactor::ONE
    };
    let (x_d, applied) = model.scale.maybe_rescale(&x, factor)?;
    let (xp, size) = pad_input(&x_d)?;
    let y = model.analysis.forward(&xp)?;
    let z = model.hyper_analysis.forward(&y)?;

    // z: plain rounding, factorized tables per channel.
    let (_, zh, zw, zc) = z.dims4()?;
    let tables = z_models(model)?;
    let mut enc = RangeEncoder::new();
    let mut z_sym = Vec::with_capacity(zh * zw * zc);
    let mut estimated_z_bits = 0.0;
    let mut clipped = 0;
    for (i, v) in host(&z)?.into_iter().enumerate() {
        let r = round_half_away(v);
        let s = r.clamp(SYMBOL_LO as f64, SYMBOL_HI as f64) as i32;
        clipped += (s as f64 != r) as usize;
        let t = &tables[i % zc];
        enc.encode(s, &t.table)?;
        estimated_z_bits += t.bits(s);
        z_sym.push(s as f64);
    }
    let z_bytes = enc.finish();
    let z_hat = Tensor::from_vec(z_sym, (1, zh, zw, zc), x.device())?.to_dtype(model.dtype())?;
    let hyper = model.hyper_synthesis.forward(&z_hat)?;

    // y: slice by slice, mean-shifted residuals under zero-mean tables.
    let slices = split_slices(&y, model.charm.num_slices())?;
    let mut gauss = GaussianTables::default();
    let mut enc = RangeEncoder::new();
    let mut decoded: Vec<Tensor> = Vec::with_capacity(slices.len());
    let mut estimated_y_bits = 0.0;
    for (i, slice) in slices.iter().enumerate() {
        let p = model.charm.params(&hyper, &decoded, i)?;
        let (yv, mu, sigma) = (host(slice)?, host(&p.mu)?, host(&p.sigma)?);
        let mut y_hat = Vec::with_capacity(yv.len());
        for k in 0..yv.len() {
            let (mq, sq) = coding_params(mu[k], sigma[k]);
            let r = round_half_away(yv[k] - mq);
            let s = r.clamp(SYMBOL_LO as f64, SYMBOL_HI as f64) as i32;
            clipped += (s as f64 != r) as usize;
            let m = gauss.get(sq)?;
            enc.encode(s, &m.table)?;
            estimated_y_bits += m.bits(s);
            // From the integer, as the decoder does, so a -0.0 residual
            // cannot give a bitwise different latent.
            y_hat.push(s as f64 + mq);
        }
        decoded.push(Tensor::from_vec(y_hat, slice.shape(), x.device())?.to_dtype(model.dtype())?);
    }
    let y_bytes = enc.finish();
    if clipped > 0 {
        log::warn!("{clipped} latent residuals exceeded the symbol range and were clamped");
    }
    let y_hat = concat_slices(&decoded)?;
    let reconstruction = reconstruct(model, &y_hat, size, applied, factor, (h, w))?;

    let stream = Bitstream {
        flags: if applied { FLAG_ADAPTED } else { 0 },
        height: h as u32,
        width: w as u32,
        m_fixed: factor.to_fixed(),
        quality_id: model.quality_id(),
        z: z_bytes,
        y: y_bytes,
    };
    Ok((
        stream,
        EncodeTrace {
            y_hat,
            z_hat,
            reconstruction,
            estimated_y_bits,
            estimated_z_bits,
            clipped,
            factor,
        },
    ))
}

fn reconstruct(
    model: &AictModel,
    y_hat: &Tensor,
    coded: (usize, usize),
    applied: bool,
    factor: ResizeFactor,
    original: (usize, usize),
) -> Result<Tensor> {
    let x_hat = crop(&model.synthesis.forward(y_hat, true)?, coded)?;
    if applied {
        Ok(model.scale.upscale(&x_hat, factor, original)?.clamp(0.0, 1.0)?)
    } else {
        Ok(x_hat)
    }
}

pub fn decode_image(model: &AictModel, stream: &Bitstream) -> Result<(Tensor, DecodeTrace)> {
    if stream.quality_id != model.quality_id() {
        return Err(Error::Input(format!(
            "bitstream was coded at quality {}, model is quality {}",
            stream.quality_id,
            model.quality_id()
        )));
    }
    let original = (stream.height as usize, stream.width as usize);
    check_size(original)?;
    let factor = stream.resize_factor();
    if stream.adapted() && ResizeFactor::new(factor.value(), model.config().scale.m_min).is_err() {
        return Err(Error::Format(format!("resize factor {} out of range", factor.value())));
    }
    let coded = stream.coded_size();
    let cfg = model.config();
    let yh = coded.0.next_multiple_of(crate::transforms::INPUT_ALIGN) / 16;
    let yw = coded.1.next_multiple_of(crate::transforms::INPUT_ALIGN) / 16;
    let (zh, zw, zc) = (yh / 4, yw / 4, cfg.hyper_latent_channels);
    let dev = model.store().device().clone();

    let tables = z_models(model)?;
    let mut dec = RangeDecoder::new(&stream.z);
    let mut z_sym = Vec::with_capacity(zh * zw * zc);
    for i in 0..zh * zw * zc {
        z_sym.push(dec.decode(&tables[i % zc].table)? as f64);
    }
    dec.finish()?;
    let z_hat = Tensor::from_vec(z_sym, (1, zh, zw, zc), &dev)?.to_dtype(model.dtype())?;
    let hyper = model.hyper_synthesis.forward(&z_hat)?;

    let cs = model.charm.slice_channels();
    let mut gauss = GaussianTables::default();
    let mut dec = RangeDecoder::new(&stream.y);
    let mut decoded: Vec<Tensor> = Vec::with_capacity(model.charm.num_slices());
    for i in 0..model.charm.num_slices() {
        let p = model.charm.params(&hyper, &decoded, i)?;
        let (mu, sigma) = (host(&p.mu)?, host(&p.sigma)?);
        let mut y_hat = Vec::with_capacity(mu.len());
        for k in 0..mu.len() {
            let (mq, sq) = coding_params(mu[k], sigma[k]);
            let s = dec.decode(&gauss.get(sq)?.table)?;
            y_hat.push(s as f64 + mq);
        }
        decoded.push(Tensor::from_vec(y_hat, (1, yh, yw, cs), &dev)?.to_dtype(model.dtype())?);
    }
    dec.finish()?;
    let y_hat = concat_slices(&decoded)?;
    let image = reconstruct(model, &y_hat, coded, stream.adapted(), factor, original)?;
    Ok((image, DecodeTrace { y_hat, z_hat }))
}
