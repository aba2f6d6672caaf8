//! Swin Transformer block: (shifted) window multi-head self-attention with a
//! learned relative position bias, followed by a 2-layer GELU MLP. Pre-norm,
//! residual connections on both sub-layers.
//!
//! Feature maps are NHWC. Edges that are not multiples of the window size are
//! replicate-padded before attention and cropped afterwards.

use candle_core::{DType, Device, Tensor};

use crate::config::SwinStageConfig;
use crate::error::{Error, Result};
use crate::layers::{gelu, softmax_last_dim, LayerNorm, Linear};
use crate::params::{Init, Scope};

const MLP_RATIO: usize = 4;
const MASK_VALUE: f64 = -100.0;

/// Index into the `(2w-1)^2` relative-bias table for every (query, key)
/// pair of a `w x w` window, row-major.
fn relative_position_index(window: usize) -> Vec<u32> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for a in 0..n {
        let (ya, xa) = (a / window, a % window);
        for b in 0..n {
            let (yb, xb) = (b / window, b % window);
            let dy = ya + window - 1 - yb;
            let dx = xa + window - 1 - xb;
            idx.push((dy * span + dx) as u32);
        }
    }
    idx
}

/// Additive attention mask for shifted windows on a padded `hp x wp` map:
/// 0 between tokens of the same pre-shift region, a large negative value
/// otherwise. Shape `(num_windows, w*w, w*w)`.
fn shifted_window_mask(
    hp: usize,
    wp: usize,
    window: usize,
    shift: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let region = |i: usize, len: usize| {
        if i < len - window {
            0
        } else if i < len - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (hp / window, wp / window);
    let n = window * window;
    let mut mask = Vec::with_capacity(nh * nw * n * n);
    for wy in 0..nh {
        for wx in 0..nw {
            let labels: Vec<usize> = (0..n)
                .map(|t| {
                    let i = wy * window + t / window;
                    let j = wx * window + t % window;
                    region(i, hp) * 3 + region(j, wp)
                })
                .collect();
            for a in 0..n {
                for b in 0..n {
                    mask.push(if labels[a] == labels[b] { 0.0 } else { MASK_VALUE });
                }
            }
        }
    }
    Ok(Tensor::from_vec(mask, (nh * nw, n, n), device)?.to_dtype(dtype)?)
}

/// `(B, H, W, C)` with `H, W` multiples of `window` -> `(B * nW, window^2, C)`.
pub(crate) fn window_partition(x: &Tensor, window: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h / window, window, w / window, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b * (h / window) * (w / window), window * window, c))?)
}

pub(crate) fn window_reverse(x: &Tensor, window: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = x.dim(2)?;
    Ok(x.reshape((b, h / window, w / window, window, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, h, w, c))?)
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

#[derive(Debug, Clone)]
pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    bias_table: Tensor,
    bias_index: Tensor,
    heads: usize,
    window: usize,
}

impl WindowAttention {
    fn new(s: &mut Scope, dim: usize, heads: usize, window: usize) -> Result<Self> {
        let span = 2 * window - 1;
        let bias_table = s.param(
            "relative_position_bias_table",
            &[span * span, heads],
            Init::TruncNormal(0.02),
        )?;
        let bias_index = Tensor::new(relative_position_index(window), &s.device())?;
        Ok(Self {
            qkv: Linear::new(&mut s.pp("qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(&mut s.pp("proj"), dim, dim, true)?,
            bias_table,
            bias_index,
            heads,
            window,
        })
    }

    fn relative_bias(&self) -> Result<Tensor> {
        let n = self.window * self.window;
        Ok(self
            .bias_table
            .index_select(&self.bias_index, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .unsqueeze(0)?)
    }

    /// `x`: `(B * nW, N, C)`; `mask`: optional `(nW, N, N)`.
    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (bn, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((bn, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * (hd as f64).powf(-0.5))?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut attn = q.matmul(&k.t()?)?.broadcast_add(&self.relative_bias()?)?;
        if let Some(mask) = mask {
            let nw = mask.dim(0)?;
            attn = attn
                .reshape((bn / nw, nw, self.heads, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((bn, self.heads, n, n))?;
        }
        let attn = softmax_last_dim(&attn)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((bn, n, c))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    dim: usize,
    window: usize,
    shift: bool,
}

impl SwinBlock {
    pub fn new(s: &mut Scope, cfg: &SwinStageConfig, shift: bool) -> Result<Self> {
        cfg.validate()?;
        let dim = cfg.embed_dim;
        Ok(Self {
            norm1: LayerNorm::new(&mut s.pp("norm1"), dim)?,
            attn: WindowAttention::new(&mut s.pp("attn"), dim, cfg.num_heads, cfg.window_size)?,
            norm2: LayerNorm::new(&mut s.pp("norm2"), dim)?,
            fc1: Linear::new(&mut s.pp("mlp.fc1"), dim, MLP_RATIO * dim, true)?,
            fc2: Linear::new(&mut s.pp("mlp.fc2"), MLP_RATIO * dim, dim, true)?,
            dim,
            window: cfg.window_size,
            shift,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Whether the shifted partition is used on an `h x w` map. Shifting is
    /// skipped when the padded map is a single window along either axis.
    pub fn shift_active(&self, h: usize, w: usize) -> bool {
        let (hp, wp) = (round_up(h, self.window), round_up(w, self.window));
        self.shift && hp.min(wp) > self.window
    }

    fn attention_branch(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let win = self.window;
        let (hp, wp) = (round_up(h, win), round_up(w, win));
        let mut t = x.pad_with_same(1, 0, hp - h)?.pad_with_same(2, 0, wp - w)?;
        let shift = self.shift_active(h, w);
        let s = win / 2;
        let mask = if shift {
            t = t.roll(-(s as i32), 1)?.roll(-(s as i32), 2)?;
            Some(shifted_window_mask(hp, wp, win, s, t.dtype(), t.device())?)
        } else {
            None
        };
        let windows = window_partition(&t.contiguous()?, win)?;
        let out = self.attn.forward(&windows, mask.as_ref())?;
        let mut t = window_reverse(&out, win, b, hp, wp)?;
        if shift {
            t = t.roll(s as i32, 1)?.roll(s as i32, 2)?;
        }
        Ok(t.narrow(1, 0, h)?.narrow(2, 0, w)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w, c) = x.dims4()?;
        if c != self.dim {
            return Err(Error::Config(format!(
                "swin block expects {} channels, got {c}",
                self.dim
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Precondition("empty feature map".into()));
        }
        let x = (x + self.attention_branch(&self.norm1.forward(x)?)?)?;
        let mlp = self.fc2.forward(&gelu(&self.fc1.forward(&self.norm2.forward(&x)?)?)?)?;
        Ok((x + mlp)?)
    }

    /// Multiply-accumulate count x2 for an `h x w` input, counted on the
    /// padded map the attention actually runs on.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let c = self.dim as u64;
        let tokens = (h * w) as u64;
        let padded = (round_up(h, self.window) * round_up(w, self.window)) as u64;
        let n = (self.window * self.window) as u64;
        let qkv = 2 * padded * c * 3 * c;
        let attn = 2 * 2 * padded * n * c;
        let proj = 2 * padded * c * c;
        let mlp = 2 * 2 * tokens * c * MLP_RATIO as u64 * c;
        qkv + attn + proj + mlp
    }

    pub fn num_params(&self) -> usize {
        let c = self.dim;
        let span = 2 * self.window - 1;
        4 * c
            + self.attn.qkv.num_params()
            + self.attn.proj.num_params()
            + span * span * self.attn.heads
            + self.fc1.num_params()
            + self.fc2.num_params()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};

    pub(crate) fn random_map(dims: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
    }

    fn block(cfg: SwinStageConfig, shift: bool) -> (ParamStore, SwinBlock) {
        let mut store = ParamStore::new(3, DType::F64);
        let b = SwinBlock::new(&mut store.root().pp("blk"), &cfg, shift).unwrap();
        (store, b)
    }

    #[test]
    fn preserves_shape() {
        let (_s, b) = block(SwinStageConfig::new(1, 32, 4, 2), false);
        let y = b.forward(&random_map((1, 8, 8, 32), 0)).unwrap();
        assert_eq!(y.dims(), &[1, 8, 8, 32]);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let (_s, b) = block(SwinStageConfig::new(1, 32, 4, 2), false);
        assert!(matches!(
            b.forward(&random_map((1, 8, 8, 16), 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_residual_branches_give_identity() {
        let (store, b) = block(SwinStageConfig::new(1, 16, 4, 2), true);
        for (name, var) in store.vars() {
            if name.contains("proj") || name.contains("fc2") {
                store.set(name, &var.zeros_like().unwrap()).unwrap();
            }
        }
        let x = random_map((2, 8, 8, 16), 5);
        let y = b.forward(&x).unwrap();
        let diff = (y - &x)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn unaligned_map_matches_explicitly_padded_attention() {
        let (_s, b) = block(SwinStageConfig::new(1, 32, 4, 2), false);
        let x = random_map((1, 6, 6, 32), 1);
        let y = b.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 6, 6, 32]);

        // Oracle: pad the normalized map by hand, attend over the full 8x8 grid
        // and crop, then add the residual and MLP branches.
        let normed = b.norm1.forward(&x).unwrap();
        let padded = normed.pad_with_same(1, 0, 2).unwrap().pad_with_same(2, 0, 2).unwrap();
        let windows = window_partition(&padded.contiguous().unwrap(), 4).unwrap();
        let attn = b.attn.forward(&windows, None).unwrap();
        let full = window_reverse(&attn, 4, 1, 8, 8).unwrap();
        let cropped = full.narrow(1, 0, 6).unwrap().narrow(2, 0, 6).unwrap();
        let h = (&x + cropped).unwrap();
        let mlp = b
            .fc2
            .forward(&gelu(&b.fc1.forward(&b.norm2.forward(&h).unwrap()).unwrap()).unwrap())
            .unwrap();
        let expected = (h + mlp).unwrap();
        let diff = (y - expected)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn aligned_input_is_unaffected_by_pad_path() {
        let (_s, b) = block(SwinStageConfig::new(1, 16, 4, 2), true);
        let x = random_map((1, 8, 8, 16), 2);
        let direct = b.forward(&x).unwrap();
        // The pad-then-crop path is a no-op here: padding by zero rows.
        let via = b.forward(&x.pad_with_same(1, 0, 0).unwrap()).unwrap();
        assert_eq!(
            direct.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            via.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn shifted_attention_masks_cross_region_pairs() {
        let m = shifted_window_mask(8, 8, 4, 2, DType::F64, &Device::Cpu).unwrap();
        let m = m.to_vec3::<f64>().unwrap();
        // The first window never straddles a shifted border.
        assert!(m[0].iter().flatten().all(|&v| v == 0.0));
        // The last window mixes four regions.
        let zeros = m[3].iter().flatten().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 4 * 4 * 4);
    }

    #[test]
    fn relative_index_is_symmetric_about_center() {
        let idx = relative_position_index(3);
        let center = (2 * 3 - 1) * (3 - 1) + (3 - 1);
        for a in 0..9 {
            assert_eq!(idx[a * 9 + a] as usize, center);
        }
        assert_eq!(*idx.iter().max().unwrap() as usize, 24);
    }

    #[test]
    fn partition_and_reverse_are_inverse() {
        let x = random_map((2, 8, 12, 3), 9);
        let w = window_partition(&x, 4).unwrap();
        assert_eq!(w.dims(), &[12, 16, 3]);
        let back = window_reverse(&w, 4, 2, 8, 12).unwrap();
        let diff = (back - x)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }
}
