mod frames;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vqvc_core::autoencoder::{AutoencoderConfig, DecoderVariant};
use vqvc_core::bitstream::{measure_bits, FrameKind, GopBitstream};
use vqvc_core::codec::{decode_sequence, encode_sequence, CodecConfig};
use vqvc_core::context::ContextConfig;
use vqvc_core::determinism::{cross_decode_report, PerturbationMode};
use vqvc_core::metrics::{bd_rate, ms_ssim, psnr, sequence_bpp, write_csv, FrameRow, RdPoint};
use vqvc_core::model::{Model, ModelConfig};
use vqvc_core::quantizer::{CodebookSpec, FitOptions};
use vqvc_core::{Error, Numerics, Tensor};

#[derive(Parser)]
#[command(name = "vqvc", version, about = "Codebook-index video codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size networks.
    Standard,
    /// Narrow networks for quick experiments; same codebook sizes.
    Small,
}

#[derive(Subcommand)]
enum Command {
    /// Write a freshly initialized weight file.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "standard")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also initialize the light decoder.
        #[arg(long)]
        light_decoder: bool,
    },
    /// Refit every codebook on a clip; network weights are passed through.
    Fit {
        #[arg(long)]
        weights: PathBuf,
        /// PNG directory or raw planar RGB8 file.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        center_crop: bool,
        #[arg(long, default_value_t = FitOptions::default().seed)]
        seed: u64,
    },
    /// Encode a clip into a stream file.
    Encode {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 32)]
        gop: usize,
        /// low, mid, high, or explicit sizes K1,K2,K3.
        #[arg(long, default_value = "low")]
        rate_point: String,
        #[arg(long)]
        center_crop: bool,
        /// Per-frame bpp/PSNR/MS-SSIM of the encoder-side reconstructions.
        #[arg(long)]
        csv_out: Option<PathBuf>,
    },
    /// Decode a stream file into frames.
    Decode {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// PNG directory, or a `.rgb`/`.raw` file.
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        light_decoder: bool,
        /// Decode under a perturbation mode (or `all`) and report the cross-decode comparison.
        #[arg(long)]
        perturb: Option<String>,
        /// Cross-decode CSV path; printed to stdout when omitted.
        #[arg(long)]
        csv_out: Option<PathBuf>,
    },
    /// Rate-distortion sweep over rate points and GOP sizes.
    Bench {
        #[arg(long)]
        weights: PathBuf,
        /// A PNG directory, or a directory of clips.
        #[arg(long)]
        dataset: PathBuf,
        /// Repeatable; defaults to every rate point the weights carry.
        #[arg(long)]
        rate_point: Vec<String>,
        /// Repeatable.
        #[arg(long, default_values_t = [32])]
        gop: Vec<usize>,
        #[arg(long)]
        center_crop: bool,
        #[arg(long)]
        light_decoder: bool,
        #[arg(long)]
        csv_out: Option<PathBuf>,
    },
}

fn numerics() -> Result<Numerics> {
    let mut num = Numerics::default();
    if let Ok(v) = std::env::var("VQVC_THREADS") {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).with_context(|| format!("VQVC_THREADS={v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        num.parallel &= n > 1;
    }
    Ok(num)
}

fn variant(light: bool) -> DecoderVariant {
    if light {
        DecoderVariant::Light
    } else {
        DecoderVariant::Standard
    }
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading weights {}", path.display()))
}

fn load_clip(path: &Path, crop: bool) -> Result<Vec<Tensor>> {
    frames::prepare(frames::read_clip(path)?, crop)
}

fn preset_config(p: Preset, light: bool) -> ModelConfig {
    let mut cfg = ModelConfig { light_decoder: light, ..Default::default() };
    if let Preset::Small = p {
        cfg.autoencoder = AutoencoderConfig { latent_channels: 32, widths: [16, 32, 32], resblocks: 1 };
        cfg.context = ContextConfig { heads: 2, head_dim: 16, ..Default::default() };
    }
    cfg
}

fn cmd_init(out: &Path, preset: Preset, seed: u64, light: bool) -> Result<()> {
    let bundle = preset_config(preset, light).initialize(seed, 0.1)?;
    bundle.save(out)?;
    println!(
        "wrote {}: {} parameters, weight hash {:016x}",
        out.display(),
        bundle.parameter_count(),
        bundle.content_hash()
    );
    Ok(())
}

fn cmd_fit(weights: &Path, input: &Path, out: &Path, crop: bool, seed: u64) -> Result<()> {
    let mut model = load_model(weights)?;
    let clip = load_clip(input, crop)?;
    let fit = model.fit_codebooks(&clip, &FitOptions { seed, ..Default::default() })?;
    let mut report = vec![("keyframe".to_string(), fit.keyframe)];
    report.extend(fit.predicted.into_iter().map(|(s, r)| (format!("predicted {s}"), r)));
    for (name, r) in report {
        let note = if r.degenerate() { " (fewer distinct vectors than codewords in some book)" } else { "" };
        println!("{name}: {r:?}{note}");
    }
    model.bundle().save(out)?;
    println!("wrote {}: weight hash {:016x}", out.display(), model.weight_hash());
    Ok(())
}

fn optional_ms_ssim(a: &Tensor, b: &Tensor) -> Option<f64> {
    ms_ssim(a, b).ok()
}

fn cmd_encode(
    weights: &Path,
    input: &Path,
    output: &Path,
    gop: usize,
    rate_point: &str,
    crop: bool,
    csv_out: Option<&Path>,
) -> Result<()> {
    let num = numerics()?;
    let model = load_model(weights)?;
    let clip = load_clip(input, crop)?;
    let cfg = CodecConfig { gop, predicted: rate_point.parse()? };
    cfg.validate()?;
    model.predicted_set(&cfg.predicted)?;
    let start = Instant::now();
    let seq = encode_sequence(&model, &cfg, &clip, &num)?;
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let mut bytes = Vec::new();
    for s in &seq.streams {
        bytes.extend(s.to_bytes()?);
    }
    fs::write(output, &bytes).with_context(|| format!("cannot write {}", output.display()))?;
    let (_, h, w) = clip[0].dims3()?;
    let index_bits: u64 = seq.streams.iter().map(|s| s.rate().map(|r| r.0)).sum::<vqvc_core::Result<_>>()?;
    let overhead: u64 = seq.streams.iter().map(|s| s.header.overhead_bits()).sum();
    println!(
        "wrote {}: {} frames {w}x{h}, {} GOPs of {gop}, rate point {}, {:.6} bpp ({index_bits} index bits + {overhead} header bits), {:.1} ms/frame",
        output.display(),
        clip.len(),
        seq.streams.len(),
        cfg.predicted,
        sequence_bpp(&seq.streams)?,
        elapsed / clip.len() as f64
    );
    if let Some(path) = csv_out {
        let mut rows = Vec::with_capacity(clip.len());
        for (i, (x, y)) in clip.iter().zip(&seq.latents).enumerate() {
            let recon = model.autoencoder.decode_image(y, DecoderVariant::Standard, &num)?;
            let spec = match cfg.kind_at(i % gop) {
                FrameKind::Key => model.keyframe.spec(),
                FrameKind::Predicted => &cfg.predicted,
            };
            let bits = measure_bits(spec, w, h)?.index_bits;
            rows.push(FrameRow {
                frame: i,
                bpp: bits as f64 / (w * h) as f64,
                psnr: psnr(x, &recon)?,
                ms_ssim: optional_ms_ssim(x, &recon),
            });
        }
        write_csv(fs::File::create(path)?, &rows)?;
    }
    Ok(())
}

fn cmd_decode(
    weights: &Path,
    input: &Path,
    output: &Path,
    light: bool,
    perturb: Option<&str>,
    csv_out: Option<&Path>,
) -> Result<()> {
    let mut num = numerics()?;
    let model = load_model(weights)?;
    let bytes = fs::read(input).with_context(|| format!("cannot read {}", input.display()))?;
    let modes: Vec<PerturbationMode> = match perturb {
        None => Vec::new(),
        Some("all") => PerturbationMode::ALL.to_vec(),
        Some(m) => vec![PerturbationMode::None, m.parse()?],
    };
    if let [_, mode] = modes[..] {
        num = mode.numerics(num.parallel);
    }
    let gops = GopBitstream::parse_all(&bytes, model.weight_hash())?;
    let start = Instant::now();
    let out = decode_sequence(&model, &gops, variant(light), &num)?;
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    frames::write_clip(&out.frames, output)?;
    println!(
        "wrote {}: {} frames, {:.6} bpp, {:.1} ms/frame",
        output.display(),
        out.frames.len(),
        sequence_bpp(&gops)?,
        elapsed / out.frames.len() as f64
    );
    if modes.is_empty() {
        return Ok(());
    }
    let report = cross_decode_report(&bytes, &model, &modes, variant(light), num.parallel)?;
    for s in &report.modes {
        let worst = s.frame_psnr.iter().copied().fold(f64::INFINITY, f64::min);
        eprintln!("{:<30} trace {:016x}  bpp {:.6}  min PSNR vs none {worst:.2} dB", s.mode.name(), s.trace_hash, s.bpp);
    }
    eprintln!(
        "index traces identical: {}, bpp identical: {}",
        report.traces_identical(),
        report.bpp_identical()
    );
    match csv_out {
        Some(p) => report.write_csv(fs::File::create(p)?)?,
        None => report.write_csv(std::io::stdout().lock())?,
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
struct BenchRow {
    clip: String,
    rate_point: String,
    gop: usize,
    frames: usize,
    bpp: f64,
    psnr: f64,
    ms_ssim: Option<f64>,
}

struct Measured {
    bits: u64,
    pixels: u64,
    psnr: Vec<f64>,
    ms_ssim: Vec<Option<f64>>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_ms_ssim(v: &[Option<f64>]) -> Option<f64> {
    let all: Option<Vec<f64>> = v.iter().copied().collect();
    all.map(|a| mean(&a))
}

fn run_point(model: &Model, cfg: &CodecConfig, clip: &[Tensor], light: bool, num: &Numerics) -> Result<Measured> {
    let seq = encode_sequence(model, cfg, clip, num)?;
    let dec = decode_sequence(model, &seq.streams, variant(light), num)?;
    let (bits, pixels) = seq.streams.iter().try_fold((0, 0), |acc, s| s.rate().map(|r| (acc.0 + r.0, acc.1 + r.1)))?;
    let psnr = clip.iter().zip(&dec.frames).map(|(a, b)| psnr(a, b)).collect::<vqvc_core::Result<_>>()?;
    let ms_ssim = clip.iter().zip(&dec.frames).map(|(a, b)| optional_ms_ssim(a, b)).collect();
    Ok(Measured { bits, pixels, psnr, ms_ssim })
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    weights: &Path,
    dataset: &Path,
    rate_points: &[String],
    gops: &[usize],
    crop: bool,
    light: bool,
    csv_out: Option<&Path>,
) -> Result<()> {
    let num = numerics()?;
    let model = load_model(weights)?;
    let specs: Vec<CodebookSpec> = if rate_points.is_empty() {
        model.config().predicted.clone()
    } else {
        rate_points.iter().map(|r| r.parse()).collect::<vqvc_core::Result<_>>()?
    };
    for s in &specs {
        model.predicted_set(s)?;
    }
    let clips = frames::dataset_clips(dataset)?;
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for &gop in gops {
        let mut curve = Vec::new();
        for spec in &specs {
            let cfg = CodecConfig { gop, predicted: *spec };
            cfg.validate()?;
            let mut all = Measured { bits: 0, pixels: 0, psnr: Vec::new(), ms_ssim: Vec::new() };
            for path in &clips {
                let clip = load_clip(path, crop)?;
                let m = run_point(&model, &cfg, &clip, light, &num)?;
                rows.push(BenchRow {
                    clip: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                    rate_point: spec.to_string(),
                    gop,
                    frames: clip.len(),
                    bpp: m.bits as f64 / m.pixels as f64,
                    psnr: mean(&m.psnr),
                    ms_ssim: mean_ms_ssim(&m.ms_ssim),
                });
                all.bits += m.bits;
                all.pixels += m.pixels;
                all.psnr.extend(m.psnr);
                all.ms_ssim.extend(m.ms_ssim);
            }
            let row = BenchRow {
                clip: "all".into(),
                rate_point: spec.to_string(),
                gop,
                frames: all.psnr.len(),
                bpp: all.bits as f64 / all.pixels as f64,
                psnr: mean(&all.psnr),
                ms_ssim: mean_ms_ssim(&all.ms_ssim),
            };
            println!(
                "gop {gop:>3}  rate point {:<16} {:.6} bpp  PSNR {:.3} dB  MS-SSIM {}",
                row.rate_point,
                row.bpp,
                row.psnr,
                row.ms_ssim.map_or("n/a".to_string(), |s| format!("{s:.5}"))
            );
            curve.push(row.clone());
            rows.push(row);
        }
        curves.push((gop, curve));
    }
    match csv_out {
        Some(p) => write_csv(fs::File::create(p)?, &rows)?,
        None => write_csv(std::io::stdout().lock(), &rows)?,
    }
    if specs.len() < 4 {
        eprintln!("warning: BD-rate needs at least 4 rate points, got {}; table omitted", specs.len());
        return Ok(());
    }
    let psnr_curve = |c: &[BenchRow]| c.iter().map(|r| RdPoint { bpp: r.bpp, quality: r.psnr }).collect::<Vec<_>>();
    let ssim_curve = |c: &[BenchRow]| -> Option<Vec<RdPoint>> {
        c.iter().map(|r| r.ms_ssim.map(|q| RdPoint { bpp: r.bpp, quality: q })).collect()
    };
    let mut err = std::io::stderr().lock();
    for (i, (ga, a)) in curves.iter().enumerate() {
        for (gb, b) in &curves[i + 1..] {
            let p = bd_rate(&psnr_curve(a), &psnr_curve(b));
            let s = ssim_curve(a).zip(ssim_curve(b)).map(|(x, y)| bd_rate(&x, &y));
            let show = |r: Option<vqvc_core::Result<f64>>| match r {
                Some(Ok(v)) => format!("{v:+.2}%"),
                Some(Err(e)) => format!("n/a ({e})"),
                None => "n/a".into(),
            };
            writeln!(err, "BD-rate gop {gb} vs gop {ga}: PSNR {}, MS-SSIM {}", show(Some(p)), show(s))?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init { out, preset, seed, light_decoder } => cmd_init(&out, preset, seed, light_decoder),
        Command::Fit { weights, input, out, center_crop, seed } => cmd_fit(&weights, &input, &out, center_crop, seed),
        Command::Encode { weights, input, output, gop, rate_point, center_crop, csv_out } => {
            cmd_encode(&weights, &input, &output, gop, &rate_point, center_crop, csv_out.as_deref())
        }
        Command::Decode { weights, input, output, light_decoder, perturb, csv_out } => {
            cmd_decode(&weights, &input, &output, light_decoder, perturb.as_deref(), csv_out.as_deref())
        }
        Command::Bench { weights, dataset, rate_point, gop, center_crop, light_decoder, csv_out } => {
            cmd_bench(&weights, &dataset, &rate_point, &gop, center_crop, light_decoder, csv_out.as_deref())
        }
    }
}

/// 0 ok, 2 usage or configuration, 3 weights do not match the stream,
/// 4 corrupt stream or weight file, 1 anything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::ModelMismatch { .. }) => 3,
        Some(Error::CorruptStream(_) | Error::Integrity(_)) => 4,
        Some(Error::Encode(_) | Error::Model(_) | Error::Domain(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
