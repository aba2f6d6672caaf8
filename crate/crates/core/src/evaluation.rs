//! Metrics and evaluation protocol: PSNR, BD-rate, cropping, model size and
//! cost, decode timing and RD-curve export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector};

use crate::coder::{decode_image, encode_image, Bitstream, EncodeOptions};
use crate::error::{Error, Result};
use crate::image_io::read_image;
use crate::model::AictModel;
use crate::scale::ResizeFactor;
use crate::transforms::INPUT_ALIGN;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const EVAL_MULTIPLE: usize = 256;
/// Label of the aggregate rows in RD tables.
pub const MEAN_ROW: &str = "mean";

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// PSNR in dB for images on the `[0, 1]` scale.
pub fn psnr(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.dims() != x_hat.dims() {
        return Err(Error::Precondition(format!(
            "shape mismatch: {:?} vs {:?}",
            x.dims(),
            x_hat.dims()
        )));
    }
    let d = (x.to_dtype(DType::F64)? - x_hat.to_dtype(DType::F64)?)?;
    let mse = d.sqr()?.mean_all()?.to_scalar::<f64>()?;
    Ok(psnr_from_mse(mse))
}

pub fn bits_per_pixel(bytes: usize, h: usize, w: usize) -> f64 {
    8.0 * bytes as f64 / (h * w) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BdResult {
    pub bd_rate_percent: f64,
    pub overlap_db: (f64, f64),
}

const BD_MIN_POINTS: usize = 4;
const BD_TRAPEZOID_POINTS: usize = 1000;

/// Least-squares cubic `log10(rate)` as a function of PSNR. The PSNR axis is
/// centred and scaled before the fit to keep the design matrix well
/// conditioned.
struct Cubic {
    coef: [f64; 4],
    center: f64,
    scale: f64,
}

impl Cubic {
    fn fit(curve: &[RdPoint]) -> Result<Self> {
        let n = curve.len();
        let center = curve.iter().map(|p| p.psnr_db).sum::<f64>() / n as f64;
        let spread = curve.iter().map(|p| (p.psnr_db - center).abs()).fold(0.0, f64::max);
        let scale = if spread > 0.0 { spread } else { 1.0 };
        let a = DMatrix::from_fn(n, 4, |i, j| ((curve[i].psnr_db - center) / scale).powi(j as i32));
        let b = DVector::from_fn(n, |i, _| curve[i].bpp.log10());
        let c = a
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|e| Error::Protocol(format!("cubic fit failed: {e}")))?;
        Ok(Self {
            coef: [c[0], c[1], c[2], c[3]],
            center,
            scale,
        })
    }

    fn eval(&self, p: f64) -> f64 {
        let c = &self.coef;
        let t = (p - self.center) / self.scale;
        ((c[3] * t + c[2]) * t + c[1]) * t + c[0]
    }
}

fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / (n - 1) as f64;
    let inner: f64 = (1..n - 1).map(|i| f(lo + i as f64 * h)).sum();
    h * (0.5 * (f(lo) + f(hi)) + inner)
}

fn check_curve(name: &str, curve: &[RdPoint]) -> Result<()> {
    if curve.len() < BD_MIN_POINTS {
        return Err(Error::Protocol(format!(
            "{name} curve has {} points, need at least {BD_MIN_POINTS}",
            curve.len()
        )));
    }
    if curve
        .iter()
        .any(|p| !(p.bpp > 0.0 && p.bpp.is_finite() && p.psnr_db.is_finite()))
    {
        return Err(Error::Protocol(format!(
            "{name} curve has a non-positive or non-finite point"
        )));
    }
    Ok(())
}

/// Bjontegaard delta rate of `test` against `anchor`, in percent. Negative
/// means `test` needs fewer bits for the same quality.
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint]) -> Result<BdResult> {
    check_curve("anchor", anchor)?;
    check_curve("test", test)?;
    let range = |c: &[RdPoint]| {
        c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.psnr_db), hi.max(p.psnr_db))
        })
    };
    let (alo, ahi) = range(anchor);
    let (tlo, thi) = range(test);
    let (lo, hi) = (alo.max(tlo), ahi.min(thi));
    if lo >= hi {
        return Err(Error::Protocol(format!(
            "PSNR ranges [{alo:.3}, {ahi:.3}] and [{tlo:.3}, {thi:.3}] do not overlap"
        )));
    }
    let (ca, ct) = (Cubic::fit(anchor)?, Cubic::fit(test)?);
    let ia = trapezoid(|p| ca.eval(p), lo, hi, BD_TRAPEZOID_POINTS);
    let it = trapezoid(|p| ct.eval(p), lo, hi, BD_TRAPEZOID_POINTS);
    let delta = (it - ia) / (hi - lo);
    Ok(BdResult {
        bd_rate_percent: 100.0 * (10f64.powf(delta) - 1.0),
        overlap_db: (lo, hi),
    })
}

/// Center-crop an NHWC image to the largest multiple of `n` on each edge.
/// `None` (with a warning) if an edge is shorter than `n`.
pub fn crop_to_multiple(x: &Tensor, n: usize) -> Result<Option<Tensor>> {
    let (_, h, w, _) = x.dims4()?;
    if h < n || w < n {
        log::warn!("skipping {h}x{w} image: an edge is below {n}");
        return Ok(None);
    }
    let (ch, cw) = (h / n * n, w / n * n);
    let out = x.narrow(1, (h - ch) / 2, ch)?.narrow(2, (w - cw) / 2, cw)?;
    Ok(Some(out.contiguous()?))
}

pub fn count_parameters(model: &AictModel) -> usize {
    model.num_params()
}

/// Multiply-accumulates x 2 of one encode + decode at `(h, w)`: all
/// transforms, the slice transforms and the resize-factor estimator.
/// Resampling and the pre/post processors are excluded because whether they
/// run depends on the image.
pub fn count_flops(model: &AictModel, h: usize, w: usize) -> u64 {
    let (ph, pw) = (h.next_multiple_of(INPUT_ALIGN), w.next_multiple_of(INPUT_ALIGN));
    let (yh, yw) = (ph / 16, pw / 16);
    let (zh, zw) = (yh / 4, yw / 4);
    model.analysis.flops(ph, pw)
        + model.hyper_analysis.flops(yh, yw)
        + model.hyper_synthesis.flops(zh, zw)
        + model.charm.flops(yh, yw)
        + model.synthesis.flops(yh, yw)
        + model.scale.flops(h, w, ResizeFactor::ONE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingStats {
    pub device: String,
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
}

impl TimingStats {
    fn from_samples(device: &str, samples_ms: Vec<f64>) -> Self {
        let mean_ms = samples_ms.iter().sum::<f64>() / samples_ms.len().max(1) as f64;
        let mut s = samples_ms.clone();
        s.sort_by(|a, b| a.total_cmp(b));
        let median_ms = match s.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => s[n / 2],
            n => 0.5 * (s[n / 2 - 1] + s[n / 2]),
        };
        Self {
            device: device.to_string(),
            samples_ms,
            mean_ms,
            median_ms,
        }
    }
}

/// Wall-clock statistics of `run(item)` over every item, `repeats` times,
/// after `warmup` untimed passes.
pub fn time_runs<T>(
    items: &[T],
    device_label: &str,
    warmup: usize,
    repeats: usize,
    mut run: impl FnMut(&T) -> Result<()>,
) -> Result<TimingStats> {
    for _ in 0..warmup {
        for it in items {
            run(it)?;
        }
    }
    let mut samples = Vec::with_capacity(repeats * items.len());
    for _ in 0..repeats {
        for it in items {
            let t0 = Instant::now();
            run(it)?;
            samples.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(TimingStats::from_samples(device_label, samples))
}

pub fn time_decode(
    model: &AictModel,
    streams: &[Bitstream],
    device_label: &str,
    warmup: usize,
    repeats: usize,
) -> Result<TimingStats> {
    time_runs(streams, device_label, warmup, repeats, |s| {
        decode_image(model, s).map(|_| ())
    })
}

/// One line of an RD table.
#[derive(Debug, Clone, PartialEq)]
pub struct RdRow {
    pub image: String,
    pub quality_id: u8,
    pub lambda: f64,
    pub bpp: f64,
    pub psnr_db: f64,
}

pub const RD_HEADER: [&str; 5] = ["image", "quality_id", "lambda", "bpp", "psnr_db"];

pub fn write_rd_csv(path: &Path, rows: &[RdRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RD_HEADER)?;
    for r in rows {
        // `{:?}` prints the shortest string that parses back to the same f64.
        w.write_record([
            r.image.clone(),
            r.quality_id.to_string(),
            format!("{:?}", r.lambda),
            format!("{:?}", r.bpp),
            format!("{:?}", r.psnr_db),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_rd_csv(path: &Path) -> Result<Vec<RdRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != RD_HEADER {
        return Err(Error::Input(format!(
            "{}: expected header {}, got {}",
            path.display(),
            RD_HEADER.join(","),
            header.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Input(format!("{}: malformed row {}", path.display(), i + 2));
        let num = |k: usize| rec.get(k).and_then(|s| s.parse::<f64>().ok()).ok_or_else(bad);
        rows.push(RdRow {
            image: rec.get(0).ok_or_else(bad)?.to_string(),
            quality_id: rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            lambda: num(2)?,
            bpp: num(3)?,
            psnr_db: num(4)?,
        });
    }
    Ok(rows)
}

/// Mean bpp and mean PSNR per quality over the per-image rows.
pub fn aggregate_rows(rows: &[RdRow]) -> Vec<RdRow> {
    let mut acc: BTreeMap<u8, (f64, f64, f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.image != MEAN_ROW) {
        let e = acc.entry(r.quality_id).or_insert((r.lambda, 0.0, 0.0, 0));
        e.1 += r.bpp;
        e.2 += r.psnr_db;
        e.3 += 1;
    }
    acc.into_iter()
        .map(|(q, (lambda, b, p, n))| RdRow {
            image: MEAN_ROW.into(),
            quality_id: q,
            lambda,
            bpp: b / n as f64,
            psnr_db: p / n as f64,
        })
        .collect()
}

fn sorted_curve(rows: impl Iterator<Item = RdRow>) -> Vec<RdPoint> {
    let mut c: Vec<RdPoint> = rows
        .map(|r| RdPoint {
            bpp: r.bpp,
            psnr_db: r.psnr_db,
        })
        .collect();
    c.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    c
}

/// Dataset-average curve: the table's aggregate rows, or aggregates computed
/// from its per-image rows when it has none.
pub fn average_curve(rows: &[RdRow]) -> Vec<RdPoint> {
    let means: Vec<RdRow> = rows.iter().filter(|r| r.image == MEAN_ROW).cloned().collect();
    if means.is_empty() {
        sorted_curve(aggregate_rows(rows).into_iter())
    } else {
        sorted_curve(means.into_iter())
    }
}

/// BD-rate between two RD tables on their dataset-average curves, or
/// averaged over the images both tables contain when `per_image` is set.
pub fn bd_rate_tables(anchor: &[RdRow], test: &[RdRow], per_image: bool) -> Result<BdResult> {
    if !per_image {
        return bd_rate(&average_curve(anchor), &average_curve(test));
    }
    let by_image = |rows: &[RdRow]| {
        let mut m: BTreeMap<String, Vec<RdRow>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.image != MEAN_ROW) {
            m.entry(r.image.clone()).or_default().push(r.clone());
        }
        m
    };
    let (a, t) = (by_image(anchor), by_image(test));
    let mut results = Vec::new();
    for (img, rows) in &a {
        if let Some(trows) = t.get(img) {
            results.push(bd_rate(
                &sorted_curve(rows.iter().cloned()),
                &sorted_curve(trows.iter().cloned()),
            )?);
        }
    }
    if results.is_empty() {
        return Err(Error::Protocol("the two tables share no images".into()));
    }
    let n = results.len() as f64;
    Ok(BdResult {
        bd_rate_percent: results.iter().map(|r| r.bd_rate_percent).sum::<f64>() / n,
        overlap_db: (
            results.iter().map(|r| r.overlap_db.0).fold(f64::NEG_INFINITY, f64::max),
            results.iter().map(|r| r.overlap_db.1).fold(f64::INFINITY, f64::min),
        ),
    })
}

/// Encode and decode every PNG in `image_dir` with each model (one per
/// quality). Returns per-image rows followed by one aggregate row per
/// quality. Containers are written to `streams_dir` when given.
pub fn export_rd(
    models: &[AictModel],
    image_dir: &Path,
    options: EncodeOptions,
    streams_dir: Option<&Path>,
) -> Result<Vec<RdRow>> {
    let mut paths: Vec<_> = fs::read_dir(image_dir)
        .map_err(|e| Error::io(image_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    if let Some(dir) = streams_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rows = Vec::new();
    for path in paths {
        let x = match read_image(&path) {
            Ok(x) => x,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let Some(x) = crop_to_multiple(&x, EVAL_MULTIPLE)? else {
            continue;
        };
        let (_, h, w, _) = x.dims4()?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        for model in models {
            let (stream, _) = encode_image(model, &x, options)?;
            let bytes = stream.to_bytes();
            if let Some(dir) = streams_dir {
                let p = dir.join(format!("{name}_q{}.aict", model.quality_id()));
                fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
            }
            let (x_hat, _) = decode_image(model, &stream)?;
            rows.push(RdRow {
                image: name.clone(),
                quality_id: model.quality_id(),
                lambda: model.lambda(),
                bpp: bits_per_pixel(bytes.len(), h, w),
                psnr_db: psnr(&x, &x_hat)?,
            });
        }
    }
    let means = aggregate_rows(&rows);
    rows.extend(means);
    Ok(rows)
}

/// RD curves as a standalone SVG line chart.
pub fn plot_rd_svg(curves: &[(String, Vec<RdPoint>)], path: &Path) -> Result<()> {
    let pts: Vec<&RdPoint> = curves.iter().flat_map(|(_, c)| c.iter()).collect();
    if pts.is_empty() {
        return Err(Error::Input("nothing to plot".into()));
    }
    let (w, h, m) = (640.0, 480.0, 60.0);
    let span = |f: fn(&RdPoint) -> f64| {
        let lo = pts.iter().map(|p| f(p)).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| f(p)).fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.05).max(1e-3);
        (lo - pad, hi + pad)
    };
    let (x0, x1) = span(|p| p.bpp);
    let (y0, y1) = span(|p| p.psnr_db);
    let sx = |v: f64| m + (v - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |v: f64| h - m - (v - y0) / (y1 - y0) * (h - 2.0 * m);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    for k in 0..=4 {
        let bx = x0 + (x1 - x0) * k as f64 / 4.0;
        let py = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{bx:.3}</text>"#,
            sx(bx),
            h - m + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{py:.2}</text>"#,
            m - 6.0,
            sy(py) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">bpp</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">PSNR (dB)</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, (label, c)) in curves.iter().enumerate() {
        let color = colors[i % colors.len()];
        let d: Vec<String> = c
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.bpp), sy(p.psnr_db)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            d.join(" ")
        );
        for p in c {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(p.bpp),
                sy(p.psnr_db)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            m + 10.0,
            m + 16.0 * (i + 1) as f64,
            label.replace('&', "&amp;").replace('<', "&lt;")
        );
    }
    s.push_str("</svg>\n");
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
