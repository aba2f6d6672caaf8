//! Seeded procedural RGB images for tests, benchmarks and smoke runs.
//!
//! Each image is a smooth colour gradient with a few flat ellipses and
//! rectangles and a little pixel noise, so it has edges, flat regions and
//! texture without needing a real dataset.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
        }
    }
}

pub fn synthetic_image(width: u32, height: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let base: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0)));
    let freq = rng.random_range(1.0..6.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let n_shapes = rng.random_range(3..9);
    let shapes: Vec<(Shape, [f64; 3])> = (0..n_shapes)
        .map(|_| {
            let colour = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let shape = if rng.random_bool(0.5) {
                Shape::Ellipse {
                    cx: rng.random_range(0.0..w),
                    cy: rng.random_range(0.0..h),
                    rx: rng.random_range(0.05..0.3) * w,
                    ry: rng.random_range(0.05..0.3) * h,
                }
            } else {
                let (x0, y0) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + rng.random_range(0.05..0.4) * w,
                    y1: y0 + rng.random_range(0.05..0.4) * h,
                }
            };
            (shape, colour)
        })
        .collect();
    let noise = rng.random_range(0.0..0.04);
    RgbImage::from_fn(width, height, |px, py| {
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        let (u, v) = (x / w, y / h);
        let wave = 0.5 + 0.5 * (freq * (u + 0.7 * v) * std::f64::consts::TAU + phase).sin();
        let mut c: [f64; 3] =
            std::array::from_fn(|k| base[0][k] * (1.0 - u) + base[1][k] * u * (1.0 - v) + base[2][k] * wave * v);
        for (shape, colour) in &shapes {
            if shape.contains(x, y) {
                c = *colour;
            }
        }
        Rgb(std::array::from_fn(|k| {
            let v = c[k] + noise * rng.random_range(-1.0..1.0);
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    })
}

/// Write `count` PNGs named `img_000.png`, ... into `dir`. Image `i` uses
/// seed `seed + i`.
pub fn write_synthetic_folder(dir: &Path, count: usize, width: u32, height: u32, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("img_{i:03}.png"));
            synthetic_image(width, height, seed + i as u64).save(&path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_seeded() {
        assert_eq!(synthetic_image(40, 30, 5), synthetic_image(40, 30, 5));
        assert_ne!(synthetic_image(40, 30, 5), synthetic_image(40, 30, 6));
        assert_eq!(synthetic_image(40, 30, 5).dimensions(), (40, 30));
    }
}
