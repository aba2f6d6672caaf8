//! Integer CDF tables shared bit-exactly by encoder and decoder.

use crate::entropy::gaussian::std_normal_cdf;
use crate::entropy::SIGMA_MIN;
use crate::error::{Error, Result};

pub const DEFAULT_PRECISION: u32 = 16;

/// Symbols are clamped residuals in `[SYMBOL_LO, SYMBOL_HI]`.
pub const SYMBOL_LO: i32 = -64;
pub const SYMBOL_HI: i32 = 63;

/// Fractional bits used to round `(mu, sigma)` before building tables.
pub const PARAM_FRAC_BITS: u32 = 16;

/// Round to the fixed-point grid both sides build tables from.
pub fn fixed_point(v: f64) -> f64 {
    let one = (1u64 << PARAM_FRAC_BITS) as f64;
    (v * one).round() / one
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    /// `cdf[0] = 0`, `cdf[n] = 2^precision`, strictly increasing.
    cdf: Vec<u32>,
    lo: i32,
    precision: u32,
}

impl CdfTable {
    /// Integer table from a pmf over `lo..lo + pmf.len()`. Every symbol gets
    /// at least one count; the rounding surplus or deficit is settled on
    /// the most probable symbol.
    pub fn from_pmf(pmf: &[f64], lo: i32, precision: u32) -> Result<Self> {
        let n = pmf.len();
        let total = 1i64 << precision;
        if n < 2 || n as i64 > total / 2 {
            return Err(Error::Precondition(format!(
                "cannot build a {precision}-bit table over {n} symbols"
            )));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::NonFinite("pmf"));
        }
        let mass: f64 = pmf.iter().sum();
        if mass <= 0.0 {
            return Err(Error::Precondition("pmf has no mass".into()));
        }
        let mut counts: Vec<i64> = pmf
            .iter()
            .map(|p| ((p / mass) * total as f64).round().max(1.0) as i64)
            .collect();
        let mut diff = total - counts.iter().sum::<i64>();
        while diff != 0 {
            let (arg, _) = counts
                .iter()
                .enumerate()
                .max_by_key(|(i, c)| (**c, std::cmp::Reverse(*i)))
                .expect("nonempty");
            let room = counts[arg] - 1;
            let step = if diff > 0 { diff } else { diff.max(-room) };
            debug_assert_ne!(step, 0);
            counts[arg] += step;
            diff -= step;
        }
        let mut cdf = Vec::with_capacity(n + 1);
        cdf.push(0u32);
        let mut acc = 0u32;
        for c in counts {
            acc += c as u32;
            cdf.push(acc);
        }
        Ok(Self { cdf, lo, precision })
    }

    /// Table of [`gaussian_pmf`].
    pub fn gaussian(mu: f64, sigma: f64, lo: i32, hi: i32, precision: u32) -> Result<Self> {
        Self::from_pmf(&gaussian_pmf(mu, sigma, lo, hi)?, lo, precision)
    }

    pub fn lo(&self) -> i32 {
        self.lo
    }

    pub fn hi(&self) -> i32 {
        self.lo + self.len() as i32 - 1
    }

    pub fn len(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cdf
    }

    /// `(start, frequency)` of symbol `s`.
    pub fn interval(&self, s: i32) -> Result<(u32, u32)> {
        if s < self.lo || s > self.hi() {
            return Err(Error::Precondition(format!(
                "symbol {s} outside [{}, {}]",
                self.lo,
                self.hi()
            )));
        }
        let k = (s - self.lo) as usize;
        Ok((self.cdf[k], self.cdf[k + 1] - self.cdf[k]))
    }

    /// Symbol whose interval contains `target < 2^precision`.
    pub fn lookup(&self, target: u32) -> i32 {
        let k = self.cdf.partition_point(|&c| c <= target) - 1;
        self.lo + k.min(self.len() - 1) as i32
    }

    pub fn probability(&self, s: i32) -> f64 {
        match self.interval(s) {
            Ok((_, f)) => f as f64 / (1u64 << self.precision) as f64,
            Err(_) => 0.0,
        }
    }
}

/// Discretized N(mu, sigma^2) on `lo..=hi`, tails folded into the edge
/// symbols. `mu` and `sigma` are first rounded to the fixed-point grid.
pub fn gaussian_pmf(mu: f64, sigma: f64, lo: i32, hi: i32) -> Result<Vec<f64>> {
    if !(mu.is_finite() && sigma.is_finite()) {
        return Err(Error::NonFinite("gaussian table parameters"));
    }
    if sigma < SIGMA_MIN - 1e-12 || lo >= hi {
        return Err(Error::Precondition(format!(
            "invalid gaussian table: sigma {sigma}, range [{lo}, {hi}]"
        )));
    }
    let (mu, sigma) = (fixed_point(mu), fixed_point(sigma));
    let lower = |x: f64| std_normal_cdf((x - mu) / sigma);
    // Upper-tail masses via symmetry keep small values accurate.
    let upper = |x: f64| std_normal_cdf((mu - x) / sigma);
    Ok((lo..=hi)
        .map(|k| {
            let s = k as f64;
            if k == lo {
                lower(s + 0.5)
            } else if k == hi {
                upper(s - 0.5)
            } else if s >= mu {
                upper(s - 0.5) - upper(s + 0.5)
            } else {
                lower(s + 0.5) - lower(s - 0.5)
            }
        })
        .collect())
}
