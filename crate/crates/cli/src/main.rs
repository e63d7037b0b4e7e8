//! `lpae` command-line tool.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lpae::analysis::{self, NetSpec, QualityReport};
use lpae::container;
use lpae::image_io::{self, load_corpus, load_image, save_image};
use lpae::model::LpaeParams;
use lpae::optim::TrainConfig;
use lpae::pyramid::{lp_build, lp_collapse, PyramidDecomposition};
use lpae::sr::{self, EmbedParams};
use lpae::train::{self, holdout_batch};
use lpae::{Rng, Tensor4};

use manifest::{CheckpointHash, CsvLog, EpochRecord, EvalRecord, RunManifest};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "lpae", version, about = "Laplacian-pyramid-like autoencoder toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for initialization and sampling (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` config overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic training corpus.
    Synth {
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Train the autoencoder; writes the checkpoint, a CSV log and a JSON manifest.
    TrainLpae {
        #[arg(long)]
        corpus: PathBuf,
        /// Images whose center crops are used for held-out evaluation.
        #[arg(long)]
        holdout: Option<PathBuf>,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Decompose an image into `levels` detail images and one approximation.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        levels: usize,
        image: PathBuf,
    },
    /// Rebuild an image from the sidecar tensors written by `encode`.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding `approx.lptn` and `detail_<k>.lptn`.
        dir: PathBuf,
        /// Print PSNR / SSIM of the written reconstruction against this image.
        #[arg(long)]
        original: Option<PathBuf>,
    },
    /// Train the super-resolution embedding on top of a trained autoencoder.
    TrainSr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        holdout: Option<PathBuf>,
        /// Magnification 2, 4 or 8 (overrides `sr_scale`).
        #[arg(long)]
        scale: Option<usize>,
    },
    /// Upscale an image; also writes the bicubic baseline.
    Sr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        embed: PathBuf,
        /// Expected magnification; must match the embedding.
        #[arg(long)]
        scale: Option<usize>,
        /// Treat the input as a high-resolution reference: center-crop it to a
        /// multiple of the scale, derive the low-resolution input from it and
        /// report PSNR / SSIM of both outputs against it.
        #[arg(long)]
        reference: bool,
        image: PathBuf,
    },
    /// PSNR and SSIM between two images.
    Metrics { a: PathBuf, b: PathBuf },
    /// Complexity, FLOPs and acceleration rate of layer tables.
    Flops {
        /// Layer table, or `vgg16` / `resnet50` for the bundled ones.
        spec: String,
        connected: Option<String>,
    },
    /// Classical Laplacian pyramid build and collapse.
    Pyramid {
        #[arg(long, default_value_t = 3)]
        levels: usize,
        image: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Usage errors are tagged explicitly; library errors are classified by kind.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(err) = cause.downcast_ref::<lpae::Error>() {
            return match err {
                lpae::Error::NonFinite(_) => EXIT_NUMERIC,
                lpae::Error::Config(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn run(cli: Cli) -> Result<()> {
    let c = cli.common;
    match cli.command {
        Command::Synth { count, size } => cmd_synth(&c, count, size),
        Command::TrainLpae { corpus, holdout, init } => cmd_train_lpae(&c, &corpus, holdout.as_deref(), init.as_deref()),
        Command::Encode {
            checkpoint,
            levels,
            image,
        } => cmd_encode(&c, &checkpoint, levels, &image),
        Command::Decode {
            checkpoint,
            dir,
            original,
        } => cmd_decode(&c, &checkpoint, &dir, original.as_deref()),
        Command::TrainSr {
            checkpoint,
            corpus,
            holdout,
            scale,
        } => cmd_train_sr(&c, &checkpoint, &corpus, holdout.as_deref(), scale),
        Command::Sr {
            checkpoint,
            embed,
            scale,
            reference,
            image,
        } => cmd_sr(&c, &checkpoint, &embed, scale, reference, &image),
        Command::Metrics { a, b } => cmd_metrics(&a, &b),
        Command::Flops { spec, connected } => cmd_flops(&spec, connected.as_deref()),
        Command::Pyramid { levels, image } => cmd_pyramid(&c, levels, &image),
    }
}

fn out_path(c: &Common) -> Result<&Path> {
    c.out.as_deref().ok_or_else(|| usage("--out is required for this command"))
}

fn train_config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `name.ext` -> `name.suffix`, next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn load_holdout(dir: Option<&Path>, crop: usize) -> Result<Option<Tensor4>> {
    match dir {
        Some(d) => {
            let images = load_corpus(d).with_context(|| format!("loading held-out images from {}", d.display()))?;
            Ok(Some(holdout_batch(&images, crop)?))
        }
        None => Ok(None),
    }
}

fn cmd_synth(c: &Common, count: usize, size: usize) -> Result<()> {
    let dir = out_path(c)?;
    let seed = c.seed.unwrap_or(1);
    let paths = image_io::write_synthetic_corpus(dir, count, size, seed)?;
    println!("wrote {} images of {size}x{size} to {}", paths.len(), dir.display());
    Ok(())
}

fn cmd_train_lpae(c: &Common, corpus_dir: &Path, holdout: Option<&Path>, init: Option<&Path>) -> Result<()> {
    let out = out_path(c)?;
    let cfg = train_config(c)?;
    let corpus = load_corpus(corpus_dir).with_context(|| format!("loading corpus {}", corpus_dir.display()))?;
    let hold = load_holdout(holdout, cfg.crop_size)?;
    let mut rng = Rng::new(cfg.seed);
    let mut params = match init {
        Some(p) => LpaeParams::load(p)?,
        None => LpaeParams::init(&mut rng)?,
    };
    let mut log = CsvLog::create(&sibling(out, "csv"), &CsvLog::lpae_header())?;
    let mut log_err = None;
    let mut records = Vec::new();
    let result = train::train_lpae(&mut params, &corpus, hold.as_ref(), &cfg, &mut rng, |row| {
        if let Some(e) = row.eval {
            println!(
                "epoch {:>5} step {:>6}  l_total {:.6}  psnr {} (bicubic {})  approx {}  I_d^2 {:.3e}",
                row.epoch,
                row.step,
                row.total,
                analysis::format_db(e.psnr),
                analysis::format_db(e.bicubic_psnr),
                analysis::format_db(e.approx_psnr),
                e.detail_energy
            );
        }
        if let Err(e) = log.lpae_row(row) {
            log_err.get_or_insert(e);
        }
        records.push(EpochRecord::from(row));
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    params.save(out)?;
    let manifest = RunManifest {
        command: "train-lpae".into(),
        seed: cfg.seed,
        config: cfg.to_text(),
        corpus_images: corpus.len(),
        holdout_images: hold.as_ref().map_or(0, Tensor4::n),
        checkpoints: vec![CheckpointHash::of(out)?],
        initial_loss: result.initial_loss,
        final_loss: result.final_loss(),
        initial_eval: result.initial_eval.map(EvalRecord::from),
        final_eval: result.final_eval.map(EvalRecord::from),
        epochs: records,
    };
    manifest.save(&sibling(out, "json"))?;
    println!(
        "initial l_total {:.6}, final {:.6}; checkpoint {}",
        result.initial_loss,
        result.final_loss(),
        out.display()
    );
    if let (Some(a), Some(b)) = (result.initial_eval, result.final_eval) {
        println!(
            "held-out: psnr {} -> {} (bicubic {}), approx {} -> {}, I_d^2 {:.3e} -> {:.3e}",
            analysis::format_db(a.psnr),
            analysis::format_db(b.psnr),
            analysis::format_db(b.bicubic_psnr),
            analysis::format_db(a.approx_psnr),
            analysis::format_db(b.approx_psnr),
            a.detail_energy,
            b.detail_energy
        );
    }
    Ok(())
}

/// Signed detail shown around mid-gray.
fn visualize_detail(d: &Tensor4) -> Tensor4 {
    d.map(|v| (v + 0.5).clamp(0.0, 1.0))
}

fn cmd_encode(c: &Common, checkpoint: &Path, levels: usize, image: &Path) -> Result<()> {
    let dir = out_path(c)?;
    let params = LpaeParams::load(checkpoint)?;
    let img = load_image(image)?;
    let pyr = params.encode_pyramid(&img, levels)?;
    write_pyramid(dir, &pyr)?;
    println!(
        "encoded {} into {} detail level(s) and a {}x{} approximation in {}",
        image.display(),
        levels,
        pyr.coarsest.h(),
        pyr.coarsest.w(),
        dir.display()
    );
    Ok(())
}

fn write_pyramid(dir: &Path, pyr: &PyramidDecomposition) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, d) in pyr.details.iter().enumerate() {
        let name = format!("detail_{}", k + 1);
        container::save_tensor(dir.join(format!("{name}.lptn")), &name, d)?;
        save_image(&visualize_detail(d), dir.join(format!("{name}.ppm")))?;
    }
    container::save_tensor(dir.join("approx.lptn"), "approx", &pyr.coarsest)?;
    save_image(&pyr.coarsest, dir.join("approx.ppm"))?;
    Ok(())
}

fn read_pyramid(dir: &Path) -> Result<PyramidDecomposition> {
    let (_, coarsest) = container::load_tensor(dir.join("approx.lptn"))
        .with_context(|| format!("reading {}", dir.join("approx.lptn").display()))?;
    let mut details = Vec::new();
    loop {
        let path = dir.join(format!("detail_{}.lptn", details.len() + 1));
        if !path.exists() {
            break;
        }
        details.push(container::load_tensor(&path)?.1);
    }
    if details.is_empty() {
        return Err(lpae::Error::Format(format!("no detail_1.lptn in {}", dir.display())).into());
    }
    Ok(PyramidDecomposition { details, coarsest })
}

fn cmd_decode(c: &Common, checkpoint: &Path, dir: &Path, original: Option<&Path>) -> Result<()> {
    let out = out_path(c)?;
    let params = LpaeParams::load(checkpoint)?;
    let pyr = read_pyramid(dir)?;
    let recon = params.decode_pyramid(&pyr)?;
    save_image(&recon, out)?;
    println!("wrote {}x{} reconstruction to {}", recon.h(), recon.w(), out.display());
    if let Some(orig) = original {
        // Compare what was written, so the numbers match `metrics` on the files.
        let report = QualityReport::compare(&load_image(out)?, &load_image(orig)?)?;
        println!("{report}");
    }
    Ok(())
}

fn cmd_train_sr(c: &Common, checkpoint: &Path, corpus_dir: &Path, holdout: Option<&Path>, scale: Option<usize>) -> Result<()> {
    let out = out_path(c)?;
    let mut cfg = train_config(c)?;
    if let Some(s) = scale {
        cfg.sr_scale = s;
        cfg.sr_lambdas = None;
        cfg.validate()?;
    }
    let mut lpae_params = LpaeParams::load(checkpoint)?;
    let corpus = load_corpus(corpus_dir).with_context(|| format!("loading corpus {}", corpus_dir.display()))?;
    let hold = load_holdout(holdout, cfg.crop_size)?;
    let mut rng = Rng::new(cfg.seed);
    let mut embed = EmbedParams::from_config(&cfg, &mut rng)?;
    let mut log = CsvLog::create(&sibling(out, "csv"), &CsvLog::sr_header(cfg.sr_levels()))?;
    let mut log_err = None;
    let mut records = Vec::new();
    let result = train::train_sr(&mut embed, &mut lpae_params, &corpus, hold.as_ref(), &cfg, &mut rng, |row| {
        if let Some(e) = row.eval {
            println!(
                "epoch {:>5} step {:>6}  l_total {:.6}  psnr {} (bicubic {})",
                row.epoch,
                row.step,
                row.total,
                analysis::format_db(e.psnr),
                analysis::format_db(e.bicubic_psnr)
            );
        }
        if let Err(e) = log.sr_row(row) {
            log_err.get_or_insert(e);
        }
        records.push(EpochRecord::from(row));
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    embed.save(out)?;
    let mut checkpoints = vec![CheckpointHash::of(out)?];
    if !cfg.sr_freeze_decoder {
        let tuned = sibling(out, "lpae");
        lpae_params.save(&tuned)?;
        checkpoints.push(CheckpointHash::of(&tuned)?);
    }
    let manifest = RunManifest {
        command: "train-sr".into(),
        seed: cfg.seed,
        config: cfg.to_text(),
        corpus_images: corpus.len(),
        holdout_images: hold.as_ref().map_or(0, Tensor4::n),
        checkpoints,
        initial_loss: result.initial_loss,
        final_loss: result.final_loss(),
        initial_eval: result.initial_eval.map(EvalRecord::from),
        final_eval: result.final_eval.map(EvalRecord::from),
        epochs: records,
    };
    manifest.save(&sibling(out, "json"))?;
    println!(
        "initial loss {:.6}, final {:.6}; embedding {}",
        result.initial_loss,
        result.final_loss(),
        out.display()
    );
    if let Some(e) = result.final_eval {
        println!(
            "held-out: sr psnr {} vs bicubic {}",
            analysis::format_db(e.psnr),
            analysis::format_db(e.bicubic_psnr)
        );
    }
    Ok(())
}

fn cmd_sr(c: &Common, checkpoint: &Path, embed_path: &Path, scale: Option<usize>, reference: bool, image: &Path) -> Result<()> {
    let out = out_path(c)?;
    let lpae_params = LpaeParams::load(checkpoint)?;
    let embed = EmbedParams::load(embed_path)?;
    let levels = embed.levels();
    if let Some(s) = scale {
        if s != 1 << levels {
            bail!(usage(format!("--scale {s} but the embedding upscales by {}", 1 << levels)));
        }
    }
    let baseline = sibling(out, "bicubic.ppm");
    if !reference {
        let result = sr::super_resolve(&embed, &lpae_params, image, levels, out, &baseline)?;
        println!(
            "wrote {}x{} to {} and bicubic baseline to {}",
            result.sr.h(),
            result.sr.w(),
            out.display(),
            baseline.display()
        );
        return Ok(());
    }
    let full = load_image(image)?;
    let hr = sr::center_crop_to_multiple(&full, levels)?;
    if hr.shape() != full.shape() {
        println!(
            "center-cropped {}x{} to {}x{} (multiple of {})",
            full.h(),
            full.w(),
            hr.h(),
            hr.w(),
            1 << levels
        );
    }
    let lr = sr::evaluation_input(&lpae_params, &hr, levels)?;
    let result = sr::upscale(&embed, &lpae_params, &lr)?;
    save_image(&result.sr, out)?;
    save_image(&result.bicubic, &baseline)?;
    println!("sr:      {}", QualityReport::compare(&result.sr, &hr)?);
    println!("bicubic: {}", QualityReport::compare(&result.bicubic, &hr)?);
    Ok(())
}

fn cmd_metrics(a: &Path, b: &Path) -> Result<()> {
    let report = QualityReport::compare(&load_image(a)?, &load_image(b)?)?;
    println!("{report}");
    for (i, ch) in report.per_channel.iter().enumerate() {
        println!("  channel {i}: PSNR {} SSIM {:.4}", analysis::format_db(ch.psnr_db), ch.ssim);
    }
    Ok(())
}

fn read_spec(name: &str) -> Result<NetSpec> {
    Ok(match name {
        "vgg16" => NetSpec::vgg16(),
        "resnet50" => NetSpec::resnet50(),
        path => NetSpec::load(path).with_context(|| format!("reading layer table {path}"))?,
    })
}

fn report_spec(label: &str, spec: &NetSpec) -> u64 {
    let n = analysis::complexity(spec);
    if spec.layers.is_empty() {
        eprintln!("warning: {label} has no layers");
    }
    println!(
        "{label}: layers {}, complexity {} ({:.2}B), FLOPs {} ({:.2}B)",
        spec.layers.len(),
        n,
        n as f64 / 1e9,
        analysis::flops(spec),
        analysis::flops(spec) as f64 / 1e9
    );
    n
}

fn cmd_flops(basic: &str, connected: Option<&str>) -> Result<()> {
    let a = report_spec(basic, &read_spec(basic)?);
    if let Some(other) = connected {
        let b = report_spec(other, &read_spec(other)?);
        println!("acceleration rate: {:.4}", analysis::acceleration_rate(a as f64, b as f64)?);
    }
    Ok(())
}

fn cmd_pyramid(c: &Common, levels: usize, image: &Path) -> Result<()> {
    let dir = out_path(c)?;
    let img = load_image(image)?;
    let pyr = lp_build(&img, levels)?;
    write_pyramid(dir, &pyr)?;
    let back = lp_collapse(&pyr)?;
    save_image(&back, dir.join("collapse.ppm"))?;
    println!(
        "{levels}-level pyramid written to {}; max |collapse - input| = {:.3e}",
        dir.display(),
        back.max_abs_diff(&img)?
    );
    Ok(())
}
