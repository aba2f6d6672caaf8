//! Benchmark fixtures.

use aict::coder::CdfTable;
use aict::image_io::rgb_to_tensor;
use aict::synthetic::synthetic_image;
use aict::{AictModel, DType, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gaussian tables with assorted scales and `n` symbols drawn from them,
/// as `(table index, symbol)`.
pub fn symbol_workload(n: usize, seed: u64) -> (Vec<CdfTable>, Vec<(usize, i32)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tables: Vec<CdfTable> = (0..32)
        .map(|i| CdfTable::gaussian(0.0, 0.11 * 1.2f64.powi(i), -64, 63, 16).unwrap())
        .collect();
    let symbols = (0..n)
        .map(|_| {
            let t = rng.random_range(0..tables.len());
            let s = tables[t].lookup(rng.random_range(0..1 << 16));
            (t, s)
        })
        .collect();
    (tables, symbols)
}

pub fn test_image(edge: u32, seed: u64) -> Tensor {
    rgb_to_tensor(&synthetic_image(edge, edge, seed)).expect("valid image")
}

pub fn model(name: &str) -> AictModel {
    AictModel::new(ModelConfig::by_name(name).expect("known config"), 0, DType::F32).expect("model builds")
}
