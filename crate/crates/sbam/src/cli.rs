//! Command-line interface.
//!
//! Flags resolve against an optional `key=value` config file (flags win),
//! and every run logs the fully resolved configuration to stderr as one
//! `resolved:` line. Outputs are pure functions of (inputs, resolved config),
//! so re-runs are byte-identical.

use std::env;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::FileConfig;
use crate::error::{Error, Result};
use crate::image::{self, Image};
use crate::masking::{self, MaskingConfig, Strategy};
use crate::metrics;
use crate::numerics::Rng;
use crate::salience;
use crate::synth;
use crate::tensorio;
use crate::tokenize;
use crate::trainer::{self, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "sbam",
    version,
    about = "Salience-based adaptive masking: salience maps, mask generation, desk-scale MAE training and ratio sweeps"
)]
pub struct Cli {
    /// Optional key=value defaults file; explicit flags override it
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write per-token salience CSV and PGM heatmaps for images
    Salience(SalienceArgs),
    /// Generate masks, writing darkened overlays and a mask CSV
    Mask(MaskArgs),
    /// Train the tiny masked autoencoder; writes loss curve and parameters
    Train(TrainArgs),
    /// Sweep strategies over masking ratios; writes a CSV with PIMR columns
    Sweep(SweepArgs),
    /// Generate synthetic planted-object images
    GenSynthetic(GenArgs),
}

#[derive(Debug, Args)]
pub struct SalienceArgs {
    /// Input images (PGM/PPM files or directories of them)
    #[arg(long, num_args = 1.., value_name = "PATH")]
    images: Vec<PathBuf>,
    /// Patch side in pixels
    #[arg(long)]
    patch_side: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long, num_args = 1.., value_name = "PATH")]
    images: Vec<PathBuf>,
    #[arg(long)]
    patch_side: Option<usize>,
    #[command(flatten)]
    masking: MaskingFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, num_args = 1.., value_name = "PATH")]
    images: Vec<PathBuf>,
    #[arg(long)]
    patch_side: Option<usize>,
    #[command(flatten)]
    masking: MaskingFlags,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch: Option<usize>,
    /// Numerical floor for target normalization
    #[arg(long)]
    eps: Option<f32>,
    /// Hidden width of the autoencoder
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, num_args = 1.., value_name = "PATH")]
    images: Vec<PathBuf>,
    #[arg(long)]
    patch_side: Option<usize>,
    /// Comma-separated strategies, e.g. random,sbam
    #[arg(long)]
    strategies: Option<String>,
    /// Comma-separated strictly increasing ratios, e.g. 0.3,0.5,0.75,0.9
    #[arg(long)]
    ratios: Option<String>,
    #[arg(long = "delta-r")]
    delta_r: Option<f32>,
    #[arg(long)]
    delta: Option<f32>,
    #[arg(long)]
    noise: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    eps: Option<f32>,
    #[arg(long)]
    d_h: Option<usize>,
    /// PIMR reference: `observed` extremes or `lowest-ratio` baseline
    #[arg(long)]
    pimr_mode: Option<String>,
    /// Output CSV path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    patch_side: Option<usize>,
    /// Object height in patches
    #[arg(long)]
    object_rows: Option<usize>,
    /// Object width in patches
    #[arg(long)]
    object_cols: Option<usize>,
    #[arg(long)]
    background: Option<f32>,
    #[arg(long)]
    object_value: Option<f32>,
    /// Per-pixel uniform jitter amplitude
    #[arg(long)]
    texture: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Masking flags shared by `mask` and `train`.
#[derive(Debug, Args)]
pub struct MaskingFlags {
    /// Strategy: random, sbam, sbam-amr or salience-only
    #[arg(long)]
    strategy: Option<String>,
    /// Base masking ratio
    #[arg(long)]
    ratio: Option<f32>,
    /// Adaptive-ratio half range
    #[arg(long = "delta-r")]
    delta_r: Option<f32>,
    /// Salience threshold for the adaptive ratio
    #[arg(long)]
    delta: Option<f32>,
    /// Salience noise amplitude
    #[arg(long)]
    noise: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Mask the lowest-salience tokens instead of the highest
    #[arg(long)]
    invert_selection: bool,
}

/// Ordered key=value pairs echoed to stderr once per run.
struct ResolvedLog {
    entries: Vec<(String, String)>,
}

impl ResolvedLog {
    fn new() -> Self {
        ResolvedLog {
            entries: Vec::new(),
        }
    }

    fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    fn emit(&self, cmd: &str) {
        let mut line = format!("resolved: cmd={cmd}");
        for (k, v) in &self.entries {
            line.push_str(&format!(" {k}={v}"));
        }
        eprintln!("{line}");
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Salience(args) => cmd_salience(args, &file),
        Command::Mask(args) => cmd_mask(args, &file),
        Command::Train(args) => cmd_train(args, &file),
        Command::Sweep(args) => cmd_sweep(args, &file),
        Command::GenSynthetic(args) => cmd_gen_synthetic(args, &file),
    }
}

/// Expands files and directories into an ordered image list.
fn collect_images(paths: &[PathBuf], file: &FileConfig) -> Result<Vec<(PathBuf, Image)>> {
    let mut inputs: Vec<PathBuf> = paths.to_vec();
    if inputs.is_empty() {
        if let Some(raw) = file.raw("images") {
            inputs = raw.split(',').map(|s| PathBuf::from(s.trim())).collect();
        }
    }
    if inputs.is_empty() {
        return Err(Error::Config("missing required flag --images".into()));
    }
    let mut files = Vec::new();
    for input in inputs {
        let meta = fs::metadata(&input).map_err(|e| Error::io(&input, e))?;
        if meta.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(&input)
                .map_err(|e| Error::io(&input, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()),
                        Some("pgm") | Some("ppm")
                    )
                })
                .collect();
            entries.sort();
            if entries.is_empty() {
                return Err(Error::format(&input, "directory holds no .pgm/.ppm files"));
            }
            files.extend(entries);
        } else {
            files.push(input);
        }
    }
    files
        .into_iter()
        .map(|p| image::read_image(&p).map(|img| (p, img)))
        .collect()
}

fn resolve_masking(
    flags: &MaskingFlags,
    file: &FileConfig,
    log: &mut ResolvedLog,
) -> Result<MaskingConfig> {
    let defaults = MaskingConfig::default();
    let strategy_name = match &flags.strategy {
        Some(s) => s.clone(),
        None => file
            .raw("strategy")
            .map(str::to_string)
            .unwrap_or_else(|| defaults.strategy.label().to_string()),
    };
    let cfg = MaskingConfig {
        strategy: strategy_name.parse()?,
        base_ratio: file.resolve(flags.ratio, "ratio", defaults.base_ratio)?,
        delta_r: file.resolve(flags.delta_r, "delta-r", defaults.delta_r)?,
        delta: file.resolve(flags.delta, "delta", defaults.delta)?,
        noise_amplitude: file.resolve(flags.noise, "noise", defaults.noise_amplitude)?,
        seed: file.resolve(flags.seed, "seed", defaults.seed)?,
        invert_selection: flags.invert_selection
            || file.get::<bool>("invert-selection")?.unwrap_or(false),
    };
    cfg.validate()?;
    log.push("strategy", cfg.strategy);
    log.push("ratio", cfg.base_ratio);
    log.push("delta-r", cfg.delta_r);
    log.push("delta", cfg.delta);
    log.push("noise", cfg.noise_amplitude);
    log.push("seed", cfg.seed);
    log.push("invert-selection", cfg.invert_selection);
    Ok(cfg)
}

fn out_dir(out: Option<PathBuf>, file: &FileConfig) -> Result<PathBuf> {
    let dir: PathBuf = file.resolve_required(out, "out")?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_salience(args: SalienceArgs, file: &FileConfig) -> Result<()> {
    let mut log = ResolvedLog::new();
    let images = collect_images(&args.images, file)?;
    let patch_side = file.resolve(args.patch_side, "patch-side", 8)?;
    let dir = out_dir(args.out, file)?;
    log.push("images", images.len());
    log.push("patch-side", patch_side);
    log.push("out", dir.display());
    log.emit("salience");

    let pixels: Vec<Image> = images.iter().map(|(_, img)| img.clone()).collect();
    let batch = tokenize::patchify(&pixels, patch_side)?;
    let map = salience::token_salience(&batch);

    let mut csv = String::from("sample,token,score\n");
    for k in 0..map.n() {
        for (t, score) in map.scores().row(k).iter().enumerate() {
            csv.push_str(&format!("{k},{t},{score}\n"));
        }
    }
    write_text(&dir.join("salience.csv"), &csv)?;

    let (rows, cols) = batch.grid();
    for k in 0..map.n() {
        let heat = Image::new(cols, rows, 1, map.scores().row(k).to_vec())?;
        image::write_image(&dir.join(format!("salience_{k:04}.pgm")), &heat)?;
    }
    Ok(())
}

/// Darkens the pixels of masked patches.
fn overlay(img: &Image, masked: &[usize], grid: (usize, usize), patch_side: usize) -> Image {
    let mut out = img.clone();
    for &token in masked {
        let (gy, gx) = (token / grid.1, token % grid.1);
        for py in 0..patch_side {
            for px in 0..patch_side {
                for c in 0..img.channels() {
                    let (x, y) = (gx * patch_side + px, gy * patch_side + py);
                    out.set(x, y, c, img.get(x, y, c) * 0.35);
                }
            }
        }
    }
    out
}

fn cmd_mask(args: MaskArgs, file: &FileConfig) -> Result<()> {
    let mut log = ResolvedLog::new();
    let images = collect_images(&args.images, file)?;
    let patch_side = file.resolve(args.patch_side, "patch-side", 8)?;
    let cfg = resolve_masking(&args.masking, file, &mut log)?;
    let dir = out_dir(args.out, file)?;
    log.push("images", images.len());
    log.push("patch-side", patch_side);
    log.push("out", dir.display());
    log.emit("mask");

    let pixels: Vec<Image> = images.iter().map(|(_, img)| img.clone()).collect();
    let batch = tokenize::patchify(&pixels, patch_side)?;
    let mut rng = Rng::from_seed(cfg.seed);
    let plan = masking::plan_masks(&batch, &cfg, &mut rng)?;

    // `ratio` is the per-sample ratio the mask was drawn at (the adaptive
    // R_dyna under sbam-amr), which stays inside [r - dr, r + dr]; the
    // realized masked fraction is recoverable from the `masked` column.
    let mut csv = String::from("sample,token,masked,salience,ratio\n");
    for k in 0..batch.n() {
        let ratio = plan.gammas[k];
        for t in 0..batch.len_tokens() {
            let masked = plan.masks.is_masked(k, t) as u8;
            match &plan.salience {
                Some(map) => {
                    let score = map.scores().at(k, t);
                    csv.push_str(&format!("{k},{t},{masked},{score},{ratio}\n"));
                }
                None => csv.push_str(&format!("{k},{t},{masked},,{ratio}\n")),
            }
        }
    }
    write_text(&dir.join("masks.csv"), &csv)?;

    for (k, (_, img)) in images.iter().enumerate() {
        let positions = plan.masks.masked_positions(k);
        let shaded = overlay(img, &positions, batch.grid(), patch_side);
        let ext = if img.channels() == 1 { "pgm" } else { "ppm" };
        image::write_image(&dir.join(format!("overlay_{k:04}.{ext}")), &shaded)?;
    }
    Ok(())
}

fn resolve_train(
    args: &TrainArgs,
    patch_side: usize,
    masking: MaskingConfig,
    file: &FileConfig,
    log: &mut ResolvedLog,
) -> Result<TrainConfig> {
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        lr: file.resolve(args.lr, "lr", defaults.lr)?,
        epochs: file.resolve(args.epochs, "epochs", defaults.epochs)?,
        batch: file.resolve(args.batch, "batch", defaults.batch)?,
        eps: file.resolve(args.eps, "eps", defaults.eps)?,
        d_h: file.resolve(args.d_h, "d-h", defaults.d_h)?,
        seed: masking.seed,
        masking,
        patch_side,
    };
    cfg.validate()?;
    log.push("epochs", cfg.epochs);
    log.push("lr", cfg.lr);
    log.push("batch", cfg.batch);
    log.push("eps", cfg.eps);
    log.push("d-h", cfg.d_h);
    Ok(cfg)
}

fn cmd_train(args: TrainArgs, file: &FileConfig) -> Result<()> {
    let mut log = ResolvedLog::new();
    let images = collect_images(&args.images, file)?;
    let patch_side = file.resolve(args.patch_side, "patch-side", 8)?;
    let masking_cfg = resolve_masking(&args.masking, file, &mut log)?;
    let train_cfg = resolve_train(&args, patch_side, masking_cfg, file, &mut log)?;
    let dir = out_dir(args.out, file)?;
    log.push("images", images.len());
    log.push("patch-side", patch_side);
    log.push("out", dir.display());
    log.emit("train");

    let pixels: Vec<Image> = images.iter().map(|(_, img)| img.clone()).collect();
    let outcome = trainer::train(&pixels, &train_cfg)?;

    let mut csv = String::from("epoch,loss\n");
    for (epoch, loss) in outcome.curve.iter().enumerate() {
        csv.push_str(&format!("{epoch},{loss}\n"));
    }
    write_text(&dir.join("loss.csv"), &csv)?;
    tensorio::save_params(&dir.join("params.sbtn"), &outcome.params)?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} entry {s:?}")))
        })
        .collect()
}

/// Worker cap from `SBAM_THREADS`; 0 or unset means one per core.
fn threads_from_env() -> Result<usize> {
    match env::var("SBAM_THREADS") {
        Err(_) => Ok(0),
        Ok(raw) => raw
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("SBAM_THREADS: cannot parse {raw:?}"))),
    }
}

fn cmd_sweep(args: SweepArgs, file: &FileConfig) -> Result<()> {
    let mut log = ResolvedLog::new();
    let images = collect_images(&args.images, file)?;
    let patch_side = file.resolve(args.patch_side, "patch-side", 8)?;

    let strategies_raw = match &args.strategies {
        Some(s) => s.clone(),
        None => file
            .raw("strategies")
            .map(str::to_string)
            .unwrap_or_else(|| "random,sbam".to_string()),
    };
    let strategies: Vec<Strategy> = parse_list(&strategies_raw, "strategy")?;
    let ratios_raw = match &args.ratios {
        Some(s) => s.clone(),
        None => file
            .raw("ratios")
            .map(str::to_string)
            .unwrap_or_else(|| "0.3,0.5,0.75,0.9".to_string()),
    };
    let ratios: Vec<f32> = parse_list(&ratios_raw, "ratio")?;

    let defaults = MaskingConfig::default();
    let delta_r = file.resolve(args.delta_r, "delta-r", defaults.delta_r)?;
    let delta = file.resolve(args.delta, "delta", defaults.delta)?;
    let noise = file.resolve(args.noise, "noise", defaults.noise_amplitude)?;
    let seed = file.resolve(args.seed, "seed", defaults.seed)?;

    let masking_cfgs: Vec<MaskingConfig> = strategies
        .iter()
        .map(|&strategy| MaskingConfig {
            strategy,
            delta_r,
            delta,
            noise_amplitude: noise,
            seed,
            ..MaskingConfig::default()
        })
        .collect();

    let train_defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        lr: file.resolve(args.lr, "lr", train_defaults.lr)?,
        epochs: file.resolve(args.epochs, "epochs", 40)?,
        batch: file.resolve(args.batch, "batch", train_defaults.batch)?,
        eps: file.resolve(args.eps, "eps", train_defaults.eps)?,
        d_h: file.resolve(args.d_h, "d-h", train_defaults.d_h)?,
        seed,
        masking: MaskingConfig {
            seed,
            ..MaskingConfig::default()
        },
        patch_side,
    };
    train_cfg.validate()?;

    let pimr_mode_raw = match &args.pimr_mode {
        Some(s) => s.clone(),
        None => file
            .raw("pimr-mode")
            .map(str::to_string)
            .unwrap_or_else(|| "observed".to_string()),
    };
    let pimr_mode = match pimr_mode_raw.as_str() {
        "observed" => metrics::PimrMode::ObservedExtremes,
        "lowest-ratio" => metrics::PimrMode::LowestRatioBaseline,
        other => {
            return Err(Error::Config(format!(
                "unknown pimr-mode {other:?} (expected observed or lowest-ratio)"
            )))
        }
    };

    let out: PathBuf = file.resolve_required(args.out, "out")?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let threads = threads_from_env()?;
    log.push("images", images.len());
    log.push("patch-side", patch_side);
    log.push("strategies", &strategies_raw);
    log.push("ratios", &ratios_raw);
    log.push("delta-r", delta_r);
    log.push("delta", delta);
    log.push("noise", noise);
    log.push("seed", seed);
    log.push("epochs", train_cfg.epochs);
    log.push("lr", train_cfg.lr);
    log.push("batch", train_cfg.batch);
    log.push("threads", threads);
    log.push("pimr-mode", &pimr_mode_raw);
    log.push("out", out.display());
    log.emit("sweep");

    let pixels: Vec<Image> = images.iter().map(|(_, img)| img.clone()).collect();
    let records =
        metrics::sweep_with_threads(&masking_cfgs, &ratios, &pixels, &train_cfg, threads)?;
    let rows = metrics::tabulate_with_mode(&records, pimr_mode)?;
    metrics::write_sweep_csv(&out, &rows)
}

fn cmd_gen_synthetic(args: GenArgs, file: &FileConfig) -> Result<()> {
    let mut log = ResolvedLog::new();
    let defaults = synth::SyntheticConfig::default();
    let cfg = synth::SyntheticConfig {
        width: file.resolve(args.width, "width", defaults.width)?,
        height: file.resolve(args.height, "height", defaults.height)?,
        patch_side: file.resolve(args.patch_side, "patch-side", defaults.patch_side)?,
        object_rows: file.resolve(args.object_rows, "object-rows", defaults.object_rows)?,
        object_cols: file.resolve(args.object_cols, "object-cols", defaults.object_cols)?,
        background: file.resolve(args.background, "background", defaults.background)?,
        object_value: file.resolve(args.object_value, "object-value", defaults.object_value)?,
        texture: file.resolve(args.texture, "texture", defaults.texture)?,
    };
    let count = file.resolve(args.count, "count", 64)?;
    let seed = file.resolve(args.seed, "seed", 0u64)?;
    let dir = out_dir(args.out, file)?;
    log.push("count", count);
    log.push("width", cfg.width);
    log.push("height", cfg.height);
    log.push("patch-side", cfg.patch_side);
    log.push("object-rows", cfg.object_rows);
    log.push("object-cols", cfg.object_cols);
    log.push("background", cfg.background);
    log.push("object-value", cfg.object_value);
    log.push("texture", cfg.texture);
    log.push("seed", seed);
    log.push("out", dir.display());
    log.emit("gen-synthetic");

    let mut rng = Rng::from_seed(seed);
    let planted = synth::generate(&cfg, count, &mut rng)?;
    let mut objects = String::from("sample,token\n");
    for (k, p) in planted.iter().enumerate() {
        image::write_image(&dir.join(format!("img_{k:04}.pgm")), &p.image)?;
        for &t in &p.object_tokens {
            objects.push_str(&format!("{k},{t}\n"));
        }
    }
    write_text(&dir.join("objects.csv"), &objects)?;
    Ok(())
}
