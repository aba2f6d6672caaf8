use std::time::Duration;

use aict::coder::{Bitstream, EncodeOptions};
use aict::evaluation::{
    aggregate_rows, bd_rate_tables, bits_per_pixel, count_flops, count_parameters, crop_to_multiple, export_rd,
    plot_rd_svg, psnr, read_rd_csv, time_runs, write_rd_csv, RdPoint, RdRow, MEAN_ROW,
};
use aict::synthetic::{synthetic_image, write_synthetic_folder};
use aict::{AictModel, ModelConfig, LAMBDAS};
use candle_core::{DType, Device, Tensor};

#[test]
fn doubling_the_area_doubles_the_flops() {
    let model = AictModel::new(ModelConfig::tiny(), 0, DType::F32).unwrap();
    for (h, w) in [(256, 256), (512, 512), (256, 768)] {
        let one = count_flops(&model, h, w) as f64;
        let two = count_flops(&model, h, 2 * w) as f64;
        let ratio = two / one;
        assert!((ratio - 2.0).abs() <= 0.02, "{h}x{w}: ratio {ratio}");
    }
}

#[test]
fn sleep_stub_timing_matches_the_stub() {
    let items = [(); 4];
    let stub = Duration::from_millis(25);
    let mut calls = 0;
    let stats = time_runs(&items, "cpu", 2, 3, |_| {
        calls += 1;
        std::thread::sleep(stub);
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 4 * 5);
    assert_eq!(stats.samples_ms.len(), 12);
    assert!(stats.samples_ms.iter().all(|s| s.is_finite() && *s >= 0.0));
    let target = stub.as_secs_f64() * 1e3;
    assert!((stats.mean_ms - target).abs() <= 0.1 * target, "mean {}", stats.mean_ms);
    assert_eq!(stats.device, "cpu");
}

#[test]
fn psnr_is_symmetric_and_falls_with_noise() {
    let dev = Device::Cpu;
    let x = aict::image_io::rgb_to_tensor(&synthetic_image(64, 48, 1))
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap();
    let noise = Tensor::randn(0f64, 1f64, x.shape(), &dev).unwrap();
    let mut last = f64::INFINITY;
    for amp in [0.001, 0.01, 0.05, 0.1, 0.3] {
        let y = (&x + (&noise * amp).unwrap()).unwrap();
        let p = psnr(&x, &y).unwrap();
        assert_eq!(p, psnr(&y, &x).unwrap());
        assert!(p < last);
        last = p;
    }
    assert!(psnr(&x, &x.narrow(1, 0, 10).unwrap()).is_err());
}

#[test]
fn crop_is_idempotent() {
    let x = Tensor::zeros((1, 700, 600, 3), DType::F32, &Device::Cpu).unwrap();
    let once = crop_to_multiple(&x, 256).unwrap().unwrap();
    let twice = crop_to_multiple(&once, 256).unwrap().unwrap();
    assert_eq!(once.dims(), twice.dims());
}

#[test]
fn parameter_count_ignores_weight_values() {
    let model = AictModel::new(ModelConfig::micro(), 0, DType::F32).unwrap();
    let before = count_parameters(&model);
    for (name, var) in model.store().vars() {
        model.store().set(name, &var.zeros_like().unwrap()).unwrap();
    }
    assert_eq!(count_parameters(&model), before);
    assert_eq!(
        before,
        AictModel::new(ModelConfig::micro(), 9, DType::F32)
            .unwrap()
            .num_params()
    );
}

fn quality_models() -> Vec<AictModel> {
    (0..4u8)
        .map(|q| {
            let mut m = AictModel::new(ModelConfig::micro(), 40 + q as u64, DType::F32).unwrap();
            m.set_quality(q, LAMBDAS[q as usize]);
            m
        })
        .collect()
}

#[test]
fn export_gives_rows_per_image_and_quality_plus_means() {
    let images = tempfile::tempdir().unwrap();
    write_synthetic_folder(images.path(), 2, 256, 256, 7).unwrap();
    // An undersized image is skipped, not fatal.
    synthetic_image(100, 300, 1)
        .save(images.path().join("small.png"))
        .unwrap();
    std::fs::write(images.path().join("broken.png"), b"not a png").unwrap();
    let streams = tempfile::tempdir().unwrap();
    let rows = export_rd(
        &quality_models(),
        images.path(),
        EncodeOptions::default(),
        Some(streams.path()),
    )
    .unwrap();
    assert_eq!(rows.len(), 8 + 4);
    assert_eq!(rows.iter().filter(|r| r.image == MEAN_ROW).count(), 4);

    for r in rows.iter().filter(|r| r.image != MEAN_ROW) {
        let path = streams.path().join(format!("{}_q{}.aict", r.image, r.quality_id));
        let bytes = std::fs::read(&path).unwrap();
        let parsed = Bitstream::from_bytes(&bytes).unwrap();
        let (h, w) = (parsed.height as usize, parsed.width as usize);
        assert_eq!((h, w), (256, 256));
        assert_eq!(r.bpp, 8.0 * bytes.len() as f64 / (h * w) as f64);
        assert_eq!(r.bpp, bits_per_pixel(parsed.len(), h, w));
        assert_eq!(r.lambda, LAMBDAS[r.quality_id as usize]);
    }
    for m in rows.iter().filter(|r| r.image == MEAN_ROW) {
        let per: Vec<&RdRow> = rows
            .iter()
            .filter(|r| r.image != MEAN_ROW && r.quality_id == m.quality_id)
            .collect();
        let mean_bpp = per.iter().map(|r| r.bpp).sum::<f64>() / per.len() as f64;
        assert!((m.bpp - mean_bpp).abs() < 1e-12);
    }

    let csv = streams.path().join("rd.csv");
    write_rd_csv(&csv, &rows).unwrap();
    assert_eq!(read_rd_csv(&csv).unwrap(), rows);
    let header = std::fs::read_to_string(&csv).unwrap();
    assert!(header.starts_with("image,quality_id,lambda,bpp,psnr_db\n"));
}

fn table(scale: f64) -> Vec<RdRow> {
    let mut rows = Vec::new();
    for (img, shift) in [("a", 0.0), ("b", 1.5)] {
        for (q, (bpp, db)) in [(0.2, 29.0), (0.45, 32.0), (0.9, 35.5), (1.7, 38.0)]
            .into_iter()
            .enumerate()
        {
            rows.push(RdRow {
                image: img.into(),
                quality_id: q as u8,
                lambda: LAMBDAS[q],
                bpp: bpp * scale,
                psnr_db: db + shift,
            });
        }
    }
    rows
}

#[test]
fn table_bd_rate_in_both_modes() {
    let anchor = table(1.0);
    let test = table(0.5);
    for per_image in [false, true] {
        let r = bd_rate_tables(&anchor, &test, per_image).unwrap();
        assert!(
            (r.bd_rate_percent + 50.0).abs() < 1e-6,
            "{per_image}: {}",
            r.bd_rate_percent
        );
        assert_eq!(
            bd_rate_tables(&anchor, &anchor, per_image).unwrap().bd_rate_percent,
            0.0
        );
    }
    let mut with_means = anchor.clone();
    with_means.extend(aggregate_rows(&anchor));
    assert_eq!(
        bd_rate_tables(&with_means, &test, false).unwrap().bd_rate_percent,
        bd_rate_tables(&anchor, &test, false).unwrap().bd_rate_percent
    );
}

#[test]
fn svg_plot_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rd.svg");
    let curve = vec![
        RdPoint {
            bpp: 0.2,
            psnr_db: 29.0,
        },
        RdPoint {
            bpp: 0.5,
            psnr_db: 32.0,
        },
    ];
    plot_rd_svg(&[("model".into(), curve)], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
    assert!(text.contains("model"));
}
