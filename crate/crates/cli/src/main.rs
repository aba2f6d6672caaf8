//! `aict`: train, encode, decode and evaluate the learned image codec.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aict::coder::{decode_image, encode_image, Bitstream, EncodeOptions};
use aict::evaluation::{
    average_curve, bd_rate_tables, bits_per_pixel, count_flops, count_parameters, export_rd, plot_rd_svg, read_rd_csv,
    write_rd_csv, MEAN_ROW,
};
use aict::image_io::{read_image, write_image};
use aict::training::{train, TrainConfig};
use aict::{AictModel, DType, ModelConfig};
use clap::{Parser, Subcommand};

/// Environment variable selecting the compute device.
const DEVICE_ENV: &str = "AICT_DEVICE";

#[derive(Parser, Debug)]
#[command(name = "aict", version, about = "Learned image codec with adaptive resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model (one lambda) from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress a PNG into an .aict file.
    Encode {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Quality index 0..=3 (0 is the largest lambda).
        #[arg(long)]
        quality: u8,
        #[arg(long)]
        ckpt: PathBuf,
        /// Never resample, whatever the estimator says.
        #[arg(long)]
        no_adapt: bool,
    },
    /// Reconstruct a PNG from an .aict file.
    Decode {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Rate-distortion table over a folder of PNGs, one checkpoint per quality.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_glob: String,
        #[arg(long)]
        csv: PathBuf,
        /// Keep the coded files here.
        #[arg(long)]
        streams: Option<PathBuf>,
        #[arg(long)]
        no_adapt: bool,
    },
    /// BD-rate of one RD table against another.
    Bdrate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Average per-image BD-rates instead of comparing mean curves.
        #[arg(long)]
        per_image: bool,
    },
    /// Plot RD tables as an SVG chart.
    PlotRd {
        #[arg(long, required = true, num_args = 1..)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the header of an .aict file.
    Info {
        #[arg(short, long)]
        input: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    User(String),
    Internal(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<aict::Error> for CliError {
    fn from(e: aict::Error) -> Self {
        if e.is_user_error() {
            CliError::User(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn user(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}

fn check_device() -> CliResult<()> {
    match std::env::var(DEVICE_ENV) {
        Err(_) => Ok(()),
        Ok(v) if v.eq_ignore_ascii_case("cpu") => Ok(()),
        Ok(v) => Err(user(format!(
            "{DEVICE_ENV}={v}: only \"cpu\" is supported by this build"
        ))),
    }
}

fn load_model(ckpt: &Path) -> CliResult<AictModel> {
    if !ckpt.is_file() {
        return Err(user(format!("checkpoint {} not found", ckpt.display())));
    }
    Ok(AictModel::load(ckpt, DType::F32)?.0)
}

fn read_stream(path: &Path) -> CliResult<Bitstream> {
    let bytes = fs::read(path).map_err(|e| user(format!("cannot read {}: {e}", path.display())))?;
    Bitstream::from_bytes(&bytes).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn cmd_train(config: &Path, data: &Path, out: &Path) -> CliResult<()> {
    let cfg = TrainConfig::from_file(config)?;
    let mut model = AictModel::new(ModelConfig::by_name(&cfg.model)?, cfg.seed, DType::F32)?;
    let report = train(&mut model, &cfg, data, out)?;
    if let Some(last) = report.records.last() {
        println!(
            "trained {} steps (from {}): loss {:.5}, d_mse {:.5}, r_bpp {:.4}",
            cfg.total_steps, report.start_step, last.loss, last.d_mse, last.r_bpp
        );
    }
    println!("checkpoint: {}", report.checkpoint.display());
    Ok(())
}

fn cmd_encode(input: &Path, output: &Path, quality: u8, ckpt: &Path, no_adapt: bool) -> CliResult<()> {
    if quality > 3 {
        return Err(user(format!("quality {quality} out of range 0..=3")));
    }
    let model = load_model(ckpt)?;
    if model.quality_id() != quality {
        return Err(user(format!(
            "{} was trained for quality {}, not {quality}",
            ckpt.display(),
            model.quality_id()
        )));
    }
    let x = read_image(input)?;
    let (_, h, w, _) = x.dims4().map_err(aict::Error::from)?;
    let (stream, _) = encode_image(&model, &x, EncodeOptions { adapt: !no_adapt })?;
    let bytes = stream.to_bytes();
    fs::write(output, &bytes).map_err(|e| user(format!("cannot write {}: {e}", output.display())))?;
    println!(
        "{} -> {}: {} bytes, {:.4} bpp, resize factor {}{}",
        input.display(),
        output.display(),
        bytes.len(),
        bits_per_pixel(bytes.len(), h, w),
        stream.resize_factor().value(),
        if stream.adapted() { "" } else { " (bypassed)" }
    );
    Ok(())
}

fn cmd_decode(input: &Path, output: &Path, ckpt: &Path) -> CliResult<()> {
    let stream = read_stream(input)?;
    let model = load_model(ckpt)?;
    let (x_hat, _) = decode_image(&model, &stream)?;
    write_image(output, &x_hat)?;
    println!(
        "{} -> {} ({}x{})",
        input.display(),
        output.display(),
        stream.width,
        stream.height
    );
    Ok(())
}

fn cmd_eval(data: &Path, pattern: &str, csv: &Path, streams: Option<&Path>, no_adapt: bool) -> CliResult<()> {
    let mut paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| user(format!("bad pattern {pattern:?}: {e}")))?
        .filter_map(|p| p.ok())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(user(format!("no checkpoint matches {pattern:?}")));
    }
    let mut models = Vec::new();
    for p in &paths {
        let m = load_model(p)?;
        println!(
            "{}: quality {}, lambda {:e}, {} parameters, {:.1} MFLOPs at 256x256",
            p.display(),
            m.quality_id(),
            m.lambda(),
            count_parameters(&m),
            count_flops(&m, 256, 256) as f64 / 1e6
        );
        models.push(m);
    }
    let rows = export_rd(&models, data, EncodeOptions { adapt: !no_adapt }, streams)?;
    write_rd_csv(csv, &rows)?;
    for r in rows.iter().filter(|r| r.image == MEAN_ROW) {
        println!("quality {}: {:.4} bpp, {:.2} dB", r.quality_id, r.bpp, r.psnr_db);
    }
    println!("wrote {} rows to {}", rows.len(), csv.display());
    Ok(())
}

fn cmd_bdrate(anchor: &Path, test: &Path, per_image: bool) -> CliResult<()> {
    let r = bd_rate_tables(&read_rd_csv(anchor)?, &read_rd_csv(test)?, per_image)?;
    println!(
        "BD-rate: {:.2}% (PSNR overlap {:.2}..{:.2} dB)",
        r.bd_rate_percent, r.overlap_db.0, r.overlap_db.1
    );
    Ok(())
}

fn cmd_plot(csvs: &[PathBuf], out: &Path) -> CliResult<()> {
    let mut curves = Vec::new();
    for p in csvs {
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("curve").to_string();
        curves.push((name, average_curve(&read_rd_csv(p)?)));
    }
    plot_rd_svg(&curves, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_info(input: &Path) -> CliResult<()> {
    let s = read_stream(input)?;
    let (ch, cw) = s.coded_size();
    let mut fields = BTreeMap::new();
    fields.insert("height", s.height.to_string());
    fields.insert("width", s.width.to_string());
    fields.insert("flags", format!("{:#04x}", s.flags));
    fields.insert("adapted", s.adapted().to_string());
    fields.insert("m", format!("{} ({}/16384)", s.resize_factor().value(), s.m_fixed));
    fields.insert("coded_size", format!("{ch}x{cw}"));
    fields.insert("quality_id", s.quality_id.to_string());
    fields.insert("z_bytes", s.z.len().to_string());
    fields.insert("y_bytes", s.y.len().to_string());
    fields.insert("total_bytes", s.len().to_string());
    fields.insert(
        "bpp",
        format!("{:.4}", bits_per_pixel(s.len(), s.height as usize, s.width as usize)),
    );
    for (k, v) in fields {
        println!("{k}: {v}");
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    check_device()?;
    match cli.command {
        Command::Train { config, data, out } => cmd_train(&config, &data, &out),
        Command::Encode {
            input,
            output,
            quality,
            ckpt,
            no_adapt,
        } => cmd_encode(&input, &output, quality, &ckpt, no_adapt),
        Command::Decode { input, output, ckpt } => cmd_decode(&input, &output, &ckpt),
        Command::Eval {
            data,
            ckpt_glob,
            csv,
            streams,
            no_adapt,
        } => cmd_eval(&data, &ckpt_glob, &csv, streams.as_deref(), no_adapt),
        Command::Bdrate {
            anchor,
            test,
            per_image,
        } => cmd_bdrate(&anchor, &test, per_image),
        Command::PlotRd { csv, out } => cmd_plot(&csv, &out),
        Command::Info { input } => cmd_info(&input),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}
