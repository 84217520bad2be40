//! `dejpeg`: command-line front end for the JPEG restoration toolkit.
//!
//! Subcommands cover the whole workflow: `degrade` writes compressed copies,
//! `train` fits the luma or chroma network, `restore` runs the two-stage
//! model over images, and `evaluate` / `sweep` / `stratify` score results
//! into CSV reports. Every run echoes its fully resolved configuration so
//! captured logs are self-describing, and nothing is written outside the
//! given --out directory (plus --log-dir for training logs).
//!
//! Exit codes: 0 success, 1 usage error, 2 file I/O or format error,
//! 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dejpeg_core::image::{load_image, save_image};
use dejpeg_core::metrics::ChannelMode;
use dejpeg_core::{eval, jpeg, train};
use dejpeg_core::{restore, Error, Model, QualityFactor, Result, TrainConfig, Variant};

#[derive(Parser)]
#[command(name = "dejpeg", version, about = "JPEG degradation, restoration and evaluation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write JPEG-degraded copies of images at one or more quality factors
    Degrade {
        /// Input image file, or directory of .png/.ppm/.pgm images
        #[arg(long = "in")]
        input: PathBuf,
        /// Quality factor 1-100, or comma-separated list
        #[arg(long, value_delimiter = ',', required = true)]
        qf: Vec<u8>,
        /// Output directory; files are named <stem>_qf<N>.<ext>
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the luma or chroma restoration network
    Train(TrainArgs),
    /// Restore degraded images with trained luma + chroma weights
    Restore {
        /// Input image file or directory; output keeps the same filenames
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Trained luma network weights
        #[arg(long)]
        y_weights: PathBuf,
        /// Trained chroma network weights
        #[arg(long)]
        cbcr_weights: PathBuf,
    },
    /// Score degraded vs. restored quality at fixed quality factors
    Evaluate {
        /// Directory of clean test images
        #[arg(long)]
        testset: PathBuf,
        /// Quality factors to evaluate, comma separated
        #[arg(long, value_delimiter = ',', default_value = "10,20,30,40")]
        qf: Vec<u8>,
        /// Channel mode: y scores the luma plane, rgb averages channels
        #[arg(long, value_enum, default_value_t = ModeArg::Y)]
        mode: ModeArg,
        #[arg(long)]
        y_weights: PathBuf,
        #[arg(long)]
        cbcr_weights: PathBuf,
        /// Output directory for per_image.csv and summary.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate across a whole quality-factor range and flag instability
    Sweep {
        /// Directory of clean test images
        #[arg(long)]
        testset: PathBuf,
        /// Lowest quality factor in the sweep
        #[arg(long, default_value_t = 5)]
        lo: u8,
        /// Highest quality factor in the sweep
        #[arg(long, default_value_t = 25)]
        hi: u8,
        #[arg(long)]
        y_weights: PathBuf,
        #[arg(long)]
        cbcr_weights: PathBuf,
        /// Output directory for sweep.csv and gnuplot-ready .dat files
        #[arg(long)]
        out: PathBuf,
    },
    /// Score restoration by 64x64 patch content: frequency and detail bins
    Stratify {
        /// Directory of clean test images
        #[arg(long)]
        testset: PathBuf,
        /// Quality factor for the degraded inputs
        #[arg(long, default_value_t = 10)]
        qf: u8,
        #[arg(long)]
        y_weights: PathBuf,
        #[arg(long)]
        cbcr_weights: PathBuf,
        /// Output directory for patches.csv, freq_bins.csv, detail_bins.csv
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Which network to train
    #[arg(long, value_enum)]
    variant: VariantArg,
    /// Plain-text `key = value` config file; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of clean training images
    #[arg(long)]
    clean_dir: PathBuf,
    /// Output directory for weights, checkpoints and the degraded cache
    #[arg(long)]
    out: PathBuf,
    /// Directory for the training log CSV (default: --out)
    #[arg(long)]
    log_dir: Option<PathBuf>,
    /// Degraded-image cache directory (default: <out>/cache)
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Trained luma weights; required when training cbcr
    #[arg(long)]
    y_weights: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Square training crop size in pixels
    #[arg(long)]
    crop: Option<usize>,
    /// Quality factors sampled during training, comma separated
    #[arg(long, value_delimiter = ',')]
    qf_set: Option<Vec<u8>>,
    /// Adam learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Epoch after which the learning rate halves
    #[arg(long)]
    lr_halve_after: Option<usize>,
    /// Seed for every random choice in the run
    #[arg(long)]
    seed: Option<u64>,
    /// Residual-in-residual block count (default: full-size for the variant)
    #[arg(long)]
    n_rrdb: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    growth: Option<usize>,
    /// Held-out validation image directory
    #[arg(long)]
    val_dir: Option<PathBuf>,
    /// Validate every this many epochs
    #[arg(long)]
    val_interval: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Y,
    Cbcr,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Y => Variant::Y,
            VariantArg::Cbcr => Variant::CbCr,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Y,
    Rgb,
}

impl From<ModeArg> for ChannelMode {
    fn from(m: ModeArg) -> ChannelMode {
        match m {
            ModeArg::Y => ChannelMode::Luma,
            ModeArg::Rgb => ChannelMode::RgbMean,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Degrade { input, qf, out } => cmd_degrade(&input, &qf, &out),
        Command::Train(args) => cmd_train(args),
        Command::Restore { input, out, y_weights, cbcr_weights } => {
            cmd_restore(&input, &out, &y_weights, &cbcr_weights)
        }
        Command::Evaluate { testset, qf, mode, y_weights, cbcr_weights, out } => {
            cmd_evaluate(&testset, &qf, mode.into(), &y_weights, &cbcr_weights, &out)
        }
        Command::Sweep { testset, lo, hi, y_weights, cbcr_weights, out } => {
            cmd_sweep(&testset, lo, hi, &y_weights, &cbcr_weights, &out)
        }
        Command::Stratify { testset, qf, y_weights, cbcr_weights, out } => {
            cmd_stratify(&testset, qf, &y_weights, &cbcr_weights, &out)
        }
    }
}

/// Print the settings a subcommand actually runs with, defaults included.
fn echo_config(command: &str, entries: &[(&str, String)]) {
    println!("resolved configuration:");
    println!("  command = {command}");
    for (key, value) in entries {
        println!("  {key} = {value}");
    }
}

fn join_u8(values: &[u8]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn shown(path: &Path) -> String {
    path.display().to_string()
}

fn shown_opt(path: &Option<PathBuf>) -> String {
    path.as_deref().map_or_else(|| "none".into(), shown)
}

const IMAGE_EXTS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

/// A file argument names just itself; a directory yields its image files
/// sorted by name.
fn input_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::Config(format!("input path {} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTS.contains(&e))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no image files in {}", input.display())));
    }
    Ok(files)
}

fn cmd_degrade(input: &Path, qf_list: &[u8], out: &Path) -> Result<()> {
    echo_config(
        "degrade",
        &[("in", shown(input)), ("qf", join_u8(qf_list)), ("out", shown(out))],
    );
    // Validate every factor before writing anything.
    let factors: Vec<QualityFactor> =
        qf_list.iter().map(|&q| QualityFactor::new(q)).collect::<Result<_>>()?;
    let files = input_files(input)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = 0usize;
    for file in &files {
        let img = load_image(file)?;
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let ext = file.extension().and_then(|s| s.to_str()).unwrap_or("png");
        for &factor in &factors {
            let degraded = jpeg::degrade(&img, factor)?;
            let path = out.join(format!("{stem}_qf{}.{ext}", factor.get()));
            save_image(&degraded, &path)?;
            println!("wrote {}", path.display());
            written += 1;
        }
    }
    println!("degraded {} image(s) x {} quality factor(s): {written} file(s)", files.len(), factors.len());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    // Precedence: built-in defaults, then the config file, then flags.
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.crop {
        cfg.crop = v;
    }
    if let Some(v) = args.qf_set.clone() {
        cfg.qf_set = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.lr_halve_after {
        cfg.lr_halve_after = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.n_rrdb {
        cfg.n_rrdb = Some(v);
    }
    if let Some(v) = args.base_channels {
        cfg.base_channels = v;
    }
    if let Some(v) = args.growth {
        cfg.growth = v;
    }
    if let Some(v) = args.val_dir.clone() {
        cfg.val_dir = Some(v);
    }
    if let Some(v) = args.val_interval {
        cfg.val_interval = v;
    }
    cfg.validate()?;

    let variant: Variant = args.variant.into();
    let spec = cfg.spec(variant)?;
    let cache_dir = args.cache_dir.clone().unwrap_or_else(|| args.out.join("cache"));
    echo_config(
        "train",
        &[
            ("network", spec.canonical()),
            ("clean_dir", shown(&args.clean_dir)),
            ("cache_dir", shown(&cache_dir)),
            ("out", shown(&args.out)),
            ("log_dir", shown_opt(&args.log_dir)),
            ("y_weights", shown_opt(&args.y_weights)),
            ("batch_size", cfg.batch_size.to_string()),
            ("crop", cfg.crop.to_string()),
            ("qf_set", join_u8(&cfg.qf_set)),
            ("lr", cfg.lr.to_string()),
            ("beta1", cfg.beta1.to_string()),
            ("beta2", cfg.beta2.to_string()),
            ("lr_halve_after", cfg.lr_halve_after.to_string()),
            ("epochs", cfg.epochs.to_string()),
            ("seed", cfg.seed.to_string()),
            ("val_dir", shown_opt(&cfg.val_dir)),
            ("val_interval", cfg.val_interval.to_string()),
        ],
    );

    let outcome =
        train::train(variant, &cfg, &args.clean_dir, &cache_dir, &args.out, args.y_weights.as_deref())?;

    let log = match &args.log_dir {
        Some(dir) if dir.as_path() != args.out.as_path() => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let name = outcome.log.file_name().unwrap_or_default();
            let target = dir.join(name);
            // Rename when possible; fall back to copy across filesystems.
            if fs::rename(&outcome.log, &target).is_err() {
                fs::copy(&outcome.log, &target).map_err(|e| Error::io(&target, e))?;
                fs::remove_file(&outcome.log).map_err(|e| Error::io(&outcome.log, e))?;
            }
            target
        }
        _ => outcome.log.clone(),
    };

    println!("final epoch mean loss: {:.6}", outcome.final_epoch_loss);
    println!("weights: {}", outcome.weights.display());
    println!("log: {}", log.display());
    Ok(())
}

fn cmd_restore(input: &Path, out: &Path, y_weights: &Path, cbcr_weights: &Path) -> Result<()> {
    echo_config(
        "restore",
        &[
            ("in", shown(input)),
            ("out", shown(out)),
            ("y_weights", shown(y_weights)),
            ("cbcr_weights", shown(cbcr_weights)),
        ],
    );
    let y_model = Model::load_auto(y_weights)?;
    let c_model = Model::load_auto(cbcr_weights)?;
    let files = input_files(input)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for file in &files {
        let img = load_image(file)?;
        let restored = restore(&y_model, &c_model, &img)?;
        let name = file
            .file_name()
            .ok_or_else(|| Error::Config(format!("input {} has no filename", file.display())))?;
        let path = out.join(name);
        save_image(&restored, &path)?;
        println!("wrote {}", path.display());
    }
    println!("restored {} image(s) into {}", files.len(), out.display());
    Ok(())
}

fn cmd_evaluate(
    testset: &Path,
    qf_list: &[u8],
    mode: ChannelMode,
    y_weights: &Path,
    cbcr_weights: &Path,
    out: &Path,
) -> Result<()> {
    echo_config(
        "evaluate",
        &[
            ("testset", shown(testset)),
            ("qf", join_u8(qf_list)),
            ("mode", mode.to_string()),
            ("y_weights", shown(y_weights)),
            ("cbcr_weights", shown(cbcr_weights)),
            ("out", shown(out)),
        ],
    );
    let y_model = Model::load_auto(y_weights)?;
    let c_model = Model::load_auto(cbcr_weights)?;
    let report = eval::fixed_qf_eval(&y_model, &c_model, testset, qf_list, mode, out)?;
    println!("{:>4} {:>8} {:>12} {:>12}", "qf", "metric", "degraded", "restored");
    for row in &report.summary {
        println!("{:>4} {:>8} {:>12.4} {:>12.4}", row.qf, row.metric, row.degraded, row.restored);
    }
    println!("per-image rows: {} -> {}", report.per_image.len(), report.per_image_csv.display());
    println!("summary -> {}", report.summary_csv.display());
    Ok(())
}

fn cmd_sweep(
    testset: &Path,
    lo: u8,
    hi: u8,
    y_weights: &Path,
    cbcr_weights: &Path,
    out: &Path,
) -> Result<()> {
    echo_config(
        "sweep",
        &[
            ("testset", shown(testset)),
            ("lo", lo.to_string()),
            ("hi", hi.to_string()),
            ("y_weights", shown(y_weights)),
            ("cbcr_weights", shown(cbcr_weights)),
            ("out", shown(out)),
        ],
    );
    let y_model = Model::load_auto(y_weights)?;
    let c_model = Model::load_auto(cbcr_weights)?;
    let result = eval::unknown_qf_sweep(&y_model, &c_model, testset, lo, hi, out)?;
    println!(
        "{:>4} {:>10} {:>10} {:>10} {:>10}",
        "qf", "degr_psnr", "rest_psnr", "degr_ssim", "rest_ssim"
    );
    for row in &result.rows {
        println!(
            "{:>4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            row.qf, row.degraded_psnr, row.restored_psnr, row.degraded_ssim, row.restored_ssim
        );
    }
    for warning in &result.warnings {
        println!("warning: {warning}");
    }
    println!("csv -> {}", result.csv.display());
    for plot in &result.plot_files {
        println!("plot data -> {}", plot.display());
    }
    Ok(())
}

fn cmd_stratify(
    testset: &Path,
    qf: u8,
    y_weights: &Path,
    cbcr_weights: &Path,
    out: &Path,
) -> Result<()> {
    echo_config(
        "stratify",
        &[
            ("testset", shown(testset)),
            ("qf", qf.to_string()),
            ("y_weights", shown(y_weights)),
            ("cbcr_weights", shown(cbcr_weights)),
            ("out", shown(out)),
        ],
    );
    let y_model = Model::load_auto(y_weights)?;
    let c_model = Model::load_auto(cbcr_weights)?;
    let report = eval::stratified_eval(&y_model, &c_model, testset, qf, out)?;
    println!("{} patches scored", report.patches.len());
    print_bins("frequency", &report.freq_bins);
    print_bins("detail", &report.detail_bins);
    println!("patches -> {}", report.patches_csv.display());
    println!("frequency bins -> {}", report.freq_csv.display());
    println!("detail bins -> {}", report.detail_csv.display());
    Ok(())
}

fn print_bins(label: &str, rows: &[eval::BinRow]) {
    println!("{label} quintiles (bin 1 = lowest score):");
    println!(
        "  {:>3} {:>5} {:>10} {:>10} {:>10} {:>10}",
        "bin", "count", "degr_psnr", "rest_psnr", "degr_ssim", "rest_ssim"
    );
    for r in rows {
        println!(
            "  {:>3} {:>5} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            r.bin, r.count, r.degraded_psnr, r.restored_psnr, r.degraded_ssim, r.restored_ssim
        );
    }
}
