//! Resize factor and the affine sampling grid built from it.
//!
//! Coordinates follow the align-corners-false convention: output pixel `i`
//! of an axis with `n` pixels sits at normalized position `(2i + 1) / n - 1`
//! and the grid maps it to `gain * that` in the source's normalized frame.

use crate::error::{Error, Result};

/// Fractional bits of the fixed-point resize factor in the bitstream.
pub const M_FRAC_BITS: u32 = 14;
const M_ONE: f64 = (1u32 << M_FRAC_BITS) as f64;

/// Smallest edge the latent ladder supports after downscaling.
pub const MIN_EDGE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ResizeFactor(f64);

impl ResizeFactor {
    pub const ONE: ResizeFactor = ResizeFactor(1.0);

    pub fn new(m: f64, m_min: f64) -> Result<Self> {
        if !(m.is_finite() && m >= m_min && m <= 1.0) {
            return Err(Error::Precondition(format!("resize factor {m} outside [{m_min}, 1]")));
        }
        Ok(Self(m))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn to_fixed(self) -> u16 {
        (self.0 * M_ONE).round() as u16
    }

    pub fn from_fixed(v: u16) -> Self {
        Self(v as f64 / M_ONE)
    }

    /// The value both encoder and decoder build grids from.
    pub fn quantized(self) -> Self {
        Self::from_fixed(self.to_fixed())
    }

    pub fn is_near_one(self, eps_skip: f64) -> bool {
        (self.0 - 1.0).abs() < eps_skip
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

/// Downscaled edge for an original edge `n`: `max(64, round(m * n))`.
pub fn scaled_edge(m: ResizeFactor, n: usize) -> usize {
    MIN_EDGE.max((m.value() * n as f64).round() as usize)
}

/// Separable affine sampling grid. `ys[i]` / `xs[j]` are the normalized
/// source coordinates of output row `i` / column `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    pub src: (usize, usize),
    pub dst: (usize, usize),
    /// Per-axis scale applied to the output's normalized coordinates.
    pub gain: (f64, f64),
    pub ys: Vec<f64>,
    pub xs: Vec<f64>,
}

pub(crate) fn centers(n: usize) -> Vec<f64> {
    (0..n).map(|i| (2 * i + 1) as f64 / n as f64 - 1.0).collect()
}

impl SamplingGrid {
    pub fn new(src: (usize, usize), dst: (usize, usize), gain: (f64, f64)) -> Self {
        let ys = centers(dst.0).into_iter().map(|u| u * gain.0).collect();
        let xs = centers(dst.1).into_iter().map(|u| u * gain.1).collect();
        Self { src, dst, gain, ys, xs }
    }

    /// Plain resize covering the whole source: unit gain.
    pub fn resize(src: (usize, usize), dst: (usize, usize)) -> Self {
        Self::new(src, dst, (1.0, 1.0))
    }

    /// Source-pixel coordinate of output row `i`.
    pub fn src_row(&self, i: usize) -> f64 {
        ((self.ys[i] + 1.0) * self.src.0 as f64 - 1.0) / 2.0
    }

    pub fn src_col(&self, j: usize) -> f64 {
        ((self.xs[j] + 1.0) * self.src.1 as f64 - 1.0) / 2.0
    }

    /// Full per-pixel `(x, y)` grid, row-major, as a spatial transformer
    /// would consume it.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.ys
            .iter()
            .flat_map(|&y| self.xs.iter().map(move |&x| (x, y)))
            .collect()
    }
}

/// Grid gain for one axis. Down: the sample spacing in source pixels is
/// exactly `1/m`; up: exactly `m`. Rounding of the target edge is absorbed
/// by the gain.
pub fn axis_gain(m: f64, src: usize, dst: usize, direction: Direction) -> f64 {
    match direction {
        Direction::Down => (dst as f64 / src as f64) / m,
        Direction::Up => m / (src as f64 / dst as f64),
    }
}

/// Grid for down- or up-scaling an image whose original size is `(h, w)`.
/// `Down` maps `(h, w)` to the scaled size; `Up` maps the scaled size back
/// to `(h, w)`.
pub fn make_grid(m: ResizeFactor, h: usize, w: usize, direction: Direction) -> SamplingGrid {
    let small = (scaled_edge(m, h), scaled_edge(m, w));
    let (src, dst) = match direction {
        Direction::Down => ((h, w), small),
        Direction::Up => (small, (h, w)),
    };
    let gain = (
        axis_gain(m.value(), src.0, dst.0, direction),
        axis_gain(m.value(), src.1, dst.1, direction),
    );
    SamplingGrid::new(src, dst, gain)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_factor_gives_identity_grid() {
        let g = make_grid(ResizeFactor::ONE, 96, 80, Direction::Down);
        assert_eq!(g.dst, (96, 80));
        for i in 0..96 {
            assert!((g.src_row(i) - i as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn half_scale_four_pixels_hits_pixel_centres() {
        let g = SamplingGrid::resize((4, 4), (2, 2));
        assert_eq!(g.ys, vec![-0.5, 0.5]);
        assert_eq!(g.xs, vec![-0.5, 0.5]);
        assert_eq!(g.src_row(0), 0.5);
        assert_eq!(g.src_row(1), 2.5);
        let m = ResizeFactor::new(0.5, 0.5).unwrap();
        assert_eq!(axis_gain(m.value(), 4, 2, Direction::Down), 1.0);
    }

    #[test]
    fn target_edges_respect_floor() {
        let m = ResizeFactor::new(0.5, 0.5).unwrap();
        assert_eq!(make_grid(m, 100, 256, Direction::Down).dst, (64, 128));
        let m = ResizeFactor::new(0.9, 0.5).unwrap();
        assert_eq!(make_grid(m, 256, 250, Direction::Down).dst, (230, 225));
    }

    #[test]
    fn down_then_up_stays_within_one_source_pixel() {
        for &(mv, h) in &[(0.5, 256usize), (0.73, 300), (0.9, 97), (0.61, 64)] {
            let m = ResizeFactor::new(mv, 0.5).unwrap().quantized();
            let down = make_grid(m, h, h, Direction::Down);
            let up = make_grid(m, h, h, Direction::Up);
            // Up maps original pixel i to a coordinate in the small image;
            // interpolate the down grid there to get back to the original.
            for i in 0..h {
                let s = up.src_row(i);
                let k = s.floor().clamp(0.0, (down.dst.0 - 1) as f64);
                let t = s - k;
                let k = k as usize;
                let a = down.src_row(k);
                let b = if k + 1 < down.dst.0 {
                    down.src_row(k + 1)
                } else {
                    a + 1.0 / mv
                };
                let back = a + t * (b - a);
                assert!((back - i as f64).abs() <= 1.0, "m={mv} h={h} i={i} back={back}");
            }
        }
    }

    #[test]
    fn fixed_point_round_trip_within_resolution() {
        for k in 0..=1000 {
            let m = 0.5 + 0.5 * k as f64 / 1000.0;
            let f = ResizeFactor::new(m, 0.5).unwrap();
            let back = ResizeFactor::from_fixed(f.to_fixed()).value();
            assert!((back - m).abs() <= 0.5f64.powi(M_FRAC_BITS as i32));
        }
        assert_eq!(ResizeFactor::ONE.to_fixed(), 16384);
    }

    #[test]
    fn grid_coordinates_are_monotone() {
        let m = ResizeFactor::new(0.66, 0.5).unwrap();
        for dir in [Direction::Down, Direction::Up] {
            let g = make_grid(m, 200, 130, dir);
            assert!(g.ys.windows(2).all(|p| p[0] < p[1]));
            assert!(g.xs.windows(2).all(|p| p[0] < p[1]));
            assert_eq!(g.points().len(), g.dst.0 * g.dst.1);
        }
    }

    #[test]
    fn out_of_range_factor_is_rejected() {
        assert!(ResizeFactor::new(0.3, 0.5).is_err());
        assert!(ResizeFactor::new(1.2, 0.5).is_err());
        assert!(ResizeFactor::new(f64::NAN, 0.5).is_err());
    }
}
