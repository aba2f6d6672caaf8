use aict::entropy::{total_rate, FactorizedPrior, QuantMode};
use aict::params::ParamStore;
use aict::training::Adam;
use aict::{AictModel, ModelConfig};
use candle_core::{DType, Device, Tensor};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn unit_gaussian_bin_bits(k: f64) -> f64 {
    use statrs::function::erf::erf;
    let cdf = |t: f64| 0.5 * (1.0 + erf(t / std::f64::consts::SQRT_2));
    -(cdf(k + 0.5) - cdf(k - 0.5)).log2()
}

/// Fit a one-channel prior to rounded unit-Gaussian samples by maximum
/// likelihood.
fn fitted_prior() -> FactorizedPrior {
    let mut store = ParamStore::new(3, DType::F64);
    let prior = FactorizedPrior::new(&mut store.root().pp("prior"), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    let n = 4096;
    for _ in 0..1500 {
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v.round()
            })
            .collect();
        let z = Tensor::from_vec(samples, (n, 1, 1, 1), &Device::Cpu).unwrap();
        let loss = prior.bits(&z).unwrap().mean_all().unwrap();
        let grads = loss.backward().unwrap();
        adam.step(&store, &grads, 1e-2, 1.0).unwrap();
    }
    prior
}

#[test]
fn fitted_prior_matches_the_unit_gaussian_and_its_own_entropy() {
    let prior = fitted_prior();
    let model = prior.channel_model(0).unwrap();
    let oracle = unit_gaussian_bin_bits(0.0);
    let at_zero = model.bits(0.0);
    assert!((oracle - 1.3849).abs() < 1e-4);
    assert!((at_zero - oracle).abs() <= 0.1, "fit {at_zero} vs {oracle}");
    for k in [-2.0, -1.0, 1.0, 2.0] {
        assert!((model.bits(k) - unit_gaussian_bin_bits(k)).abs() <= 0.25, "k = {k}");
    }

    let pmf = model.pmf(-64, 63);
    let entropy: f64 = pmf.iter().filter(|&&p| p > 0.0).map(|p| -p * p.log2()).sum();
    let dist = WeightedIndex::new(&pmf).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 100_000;
    let mean_bits = (0..draws)
        .map(|_| model.bits((dist.sample(&mut rng) as i32 - 64) as f64))
        .sum::<f64>()
        / draws as f64;
    assert!(
        (mean_bits - entropy).abs() <= 0.02 * entropy,
        "{mean_bits} vs {entropy}"
    );
}

#[test]
fn doubling_latent_area_doubles_the_bits() {
    let cfg = ModelConfig::tiny();
    let model = AictModel::new(cfg.clone(), 8, DType::F32).unwrap();
    let bits = |h: usize, w: usize, seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = (Tensor::randn(0f32, 1f32, (1, h, w, cfg.latent_channels), &Device::Cpu).unwrap() * 2.0).unwrap();
        let z = Tensor::randn(0f32, 1f32, (1, h / 4, w / 4, cfg.hyper_latent_channels), &Device::Cpu).unwrap();
        let r = total_rate(
            &y,
            &z,
            &model.hyper_synthesis,
            &model.prior,
            &model.charm,
            QuantMode::Round,
            &mut rng,
        )
        .unwrap();
        let by = r.bits_y.to_scalar::<f32>().unwrap() as f64;
        let bz = r.bits_z.to_scalar::<f32>().unwrap() as f64;
        assert!(by >= 0.0 && bz >= 0.0);
        (by, bz)
    };
    let (y1, z1) = bits(16, 16, 1);
    let (y2, z2) = bits(16, 32, 2);
    let (y4, _) = bits(32, 32, 3);
    assert!((y2 / y1 - 2.0).abs() <= 0.1, "{y1} -> {y2}");
    assert!((y4 / y2 - 2.0).abs() <= 0.1, "{y2} -> {y4}");
    assert!((z2 / z1 - 2.0).abs() <= 0.1, "{z1} -> {z2}");
}

#[test]
fn first_slice_ignores_every_later_slice() {
    let cfg = ModelConfig::tiny();
    let model = AictModel::new(cfg.clone(), 9, DType::F32).unwrap();
    let hyper = Tensor::randn(0f32, 1f32, (1, 4, 4, cfg.hyper_feature_channels), &Device::Cpu).unwrap();
    let p = model.charm.params(&hyper, &[], 0).unwrap();
    assert_eq!(p.mu.dims(), &[1, 4, 4, 24]);
    assert_eq!(p.sigma.dims(), &[1, 4, 4, 24]);
    let sig = p.sigma.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert!(sig.iter().all(|&s| s >= aict::entropy::SIGMA_MIN as f32));
}
