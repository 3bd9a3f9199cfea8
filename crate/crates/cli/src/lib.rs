//! Argument types and subcommand runners for the `bilateral` binary.
//!
//! Results go to the writer handed to [`run`] (stdout in the binary);
//! diagnostics go to stderr. Exit codes: 0 success, 1 runtime failure,
//! 2 usage error.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use bilateral_enhance::checkpoint::{self, Checkpoint};
use bilateral_enhance::data::synth::{parse_experts, synth_dataset, SynthOptions};
use bilateral_enhance::data::{combine_experts, load_image, load_manifest, save_image, Dataset};
use bilateral_enhance::fullres::{enhance, Model};
use bilateral_enhance::gradcheck::{self, GradCheckOptions};
use bilateral_enhance::net::{Mode, NetConfig};
use bilateral_enhance::train::{self, EvalReport, Schedule, Start, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "BILATERAL_THREADS";

#[derive(Debug, Parser)]
#[command(name = "bilateral", version, about = "Learned bilateral-grid image enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on one or more manifests.
    Train(TrainArgs),
    /// Enhance one image with a trained model.
    Infer(InferArgs),
    /// Per-image loss and PSNR of a model on a manifest.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable op and of a small model.
    Gradcheck(GradcheckArgs),
    /// Generate synthetic input images and per-expert targets.
    SynthData(SynthArgs),
    /// Write a checkpoint whose every grid cell is the identity transform.
    IdentityModel(IdentityArgs),
}

#[derive(Debug, Clone, Copy, Args)]
pub struct NetArgs {
    /// Channel multiplier of the low-resolution network.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Side of the low-resolution copy fed to the network.
    #[arg(long, default_value_t = 256)]
    pub lowres: usize,
    /// Depth bins of the bilateral grid.
    #[arg(long, default_value_t = 8)]
    pub depth: usize,
}

impl From<NetArgs> for NetConfig {
    fn from(a: NetArgs) -> Self {
        NetConfig {
            scale: a.scale,
            lowres: a.lowres,
            depth: a.depth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Fixed,
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StartArg {
    /// Prediction layer starts at the identity grid.
    Identity,
    /// Every layer starts from its random initialization.
    Glorot,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest; repeat to combine several experts.
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    /// Manifest for the per-epoch evaluation row (default: the training set).
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Base learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Exp)]
    pub schedule: ScheduleArg,
    /// Per-epoch decay factor of the exponential schedule.
    #[arg(long, default_value_t = train::DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = StartArg::Identity)]
    pub start: StartArg,
    /// Checkpoint written at the end of every epoch.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV metrics log.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub net: NetArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, short)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Manifest to evaluate; repeat to combine several.
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    /// Per-image CSV report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    Double,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    #[arg(long, value_enum, default_value_t = Precision::Double)]
    pub precision: Precision,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of input images.
    #[arg(long, default_value_t = 50)]
    pub count: usize,
    /// Side of the square images.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// JSON list of experts.
    #[arg(long)]
    pub experts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IdentityArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub net: NetArgs,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<bilateral_enhance::Error> for Failure {
    fn from(e: bilateral_enhance::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// Sizes the global worker pool from [`THREADS_ENV`] when it is set.
pub fn configure_threads() -> Outcome {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV}={value} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Outcome {
    match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Infer(a) => cmd_infer(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::SynthData(a) => cmd_synth_data(a, out),
        Command::IdentityModel(a) => cmd_identity(a, out),
    }
}

fn load_all(paths: &[PathBuf]) -> Result<Dataset, Failure> {
    let sets = paths.iter().map(|p| load_manifest(p)).collect::<Result<Vec<_>, _>>()?;
    Ok(combine_experts(&sets))
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Outcome {
    let cfg = TrainConfig {
        base_lr: a.lr,
        schedule: match a.schedule {
            ScheduleArg::Fixed => Schedule::Fixed,
            ScheduleArg::Exp => Schedule::Exponential { gamma: a.gamma },
        },
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        start: match a.start {
            StartArg::Identity => Start::IdentityGrid,
            StartArg::Glorot => Start::Glorot,
        },
        net: a.net.into(),
        checkpoint: Some(a.out.clone()),
        metrics: a.metrics,
        resume: a.resume,
        validation: None,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let dataset = load_all(&a.manifests)?;
    if dataset.is_empty() {
        return Err(Failure::Usage("training manifests list no pairs".into()));
    }
    eprintln!("training set: {} pairs from {} manifests", dataset.len(), a.manifests.len());
    let validation = match &a.validation {
        Some(p) => {
            let v = load_manifest(p)?;
            if v.is_empty() {
                return Err(Failure::Usage(format!("validation manifest {} lists no pairs", p.display())));
            }
            eprintln!("validation set: {} pairs", v.len());
            Some(v)
        }
        None => None,
    };
    let cfg = TrainConfig { validation, ..cfg };
    let started = Instant::now();
    let result = train::train(&dataset, &cfg)?;
    let last = result.rows.iter().rev().find(|r| r.step.is_none());
    writeln!(out, "steps: {}", result.adam.step)?;
    if let Some(r) = last {
        writeln!(out, "final eval: loss {:.6e}, psnr {:.3} dB", r.loss, r.psnr)?;
    }
    writeln!(out, "checkpoint: {}", a.out.display())?;
    eprintln!("trained in {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_infer(a: InferArgs, out: &mut dyn Write) -> Outcome {
    let started = Instant::now();
    let model = checkpoint::load(&a.model)?.model;
    let image = load_image(&a.input)?;
    let result = enhance(&image, &model, Mode::Infer)?.map(|v| v.clamp(0.0, 1.0));
    save_image(&result, &a.output)?;
    if a.verbose {
        let s = result.shape();
        writeln!(
            out,
            "{} → {}: {}×{} in {:.1} ms",
            a.input.display(),
            a.output.display(),
            s[1],
            s[0],
            started.elapsed().as_secs_f64() * 1e3
        )?;
    }
    Ok(())
}

/// Per-image CSV: header, one row per pair, then a `mean,all,…` summary.
pub fn write_report(path: &Path, report: &EvalReport) -> io::Result<()> {
    let mut text = String::from("input,expert,loss,psnr\n");
    for r in &report.rows {
        text.push_str(&format!("{},{},{},{}\n", r.input.display(), r.expert, r.loss, r.psnr));
    }
    let o = &report.overall;
    text.push_str(&format!("mean,all,{},{}\n", o.mean_loss, o.mean_psnr));
    fs::write(path, text)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Outcome {
    if !a.model.exists() {
        return Err(Failure::Usage(format!("model {} does not exist", a.model.display())));
    }
    let dataset = load_all(&a.manifests)?;
    if dataset.is_empty() {
        return Err(Failure::Usage("manifest lists no pairs".into()));
    }
    let model = checkpoint::load(&a.model)?.model;
    let report = train::evaluate(&model, &dataset)?;
    if let Some(path) = &a.report {
        write_report(path, &report).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    let o = &report.overall;
    writeln!(
        out,
        "mean loss {:.6e}, mean psnr {:.3} dB over {} pairs ({} exact)",
        o.mean_loss, o.mean_psnr, o.count, o.infinite
    )?;
    for (expert, s) in &report.per_expert {
        writeln!(
            out,
            "expert {expert}: loss {:.6e}, psnr {:.3} dB over {} pairs",
            s.mean_loss, s.mean_psnr, s.count
        )?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Outcome {
    if !(a.tolerance > 0.0 && a.step > 0.0) {
        return Err(Failure::Usage("tolerance and step must be positive".into()));
    }
    let opts = GradCheckOptions {
        step: a.step,
        tolerance: a.tolerance,
        ..GradCheckOptions::default()
    };
    let checks = gradcheck::suite(a.seed, &opts);
    writeln!(out, "{:<16} {:>12} {:>8} {:>8}  status", "check", "max rel err", "checked", "kinks")?;
    let mut failed = Vec::new();
    for c in &checks {
        let r = &c.report;
        let status = if r.pass { "ok" } else { "FAIL" };
        writeln!(
            out,
            "{:<16} {:>12.3e} {:>8} {:>8}  {status}",
            c.name, r.max_rel_err, r.checked, r.skipped_kinks
        )?;
        if let Some(msg) = &r.failure {
            eprintln!("{}: {msg}", c.name);
        }
        if !r.pass {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        writeln!(out, "all {} checks passed at tolerance {:e}", checks.len(), a.tolerance)?;
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn cmd_synth_data(a: SynthArgs, out: &mut dyn Write) -> Outcome {
    if a.count == 0 || a.size == 0 {
        return Err(Failure::Usage("--count and --size must be positive".into()));
    }
    let text = fs::read_to_string(&a.experts)
        .map_err(|e| Failure::Usage(format!("{}: {e}", a.experts.display())))?;
    let experts =
        parse_experts(&text).map_err(|e| Failure::Usage(format!("{}: {e}", a.experts.display())))?;
    let opts = SynthOptions {
        seed: a.seed,
        count: a.count,
        height: a.size,
        width: a.size,
    };
    let result = synth_dataset(&opts, &experts, &a.out)?;
    for m in &result.manifests {
        writeln!(out, "{}", m.display())?;
    }
    Ok(())
}

fn cmd_identity(a: IdentityArgs, out: &mut dyn Write) -> Outcome {
    let config: NetConfig = a.net.into();
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    checkpoint::save(&a.out, &Checkpoint::model_only(Model::identity(config)?))?;
    writeln!(out, "{}", a.out.display())?;
    Ok(())
}
