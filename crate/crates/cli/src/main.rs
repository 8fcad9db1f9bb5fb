//! `certiqa`: data generation, training, certification, attacks and reports
//! for the certified quality-metric pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or missing inputs: exit code 1.
    Usage(String),
    /// Failure after validation (infeasible smoothing, corrupt file): exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn from_core(e: certiqa::Error) -> Self {
        match e {
            certiqa::Error::Config { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<certiqa::Error> for CliError {
    fn from(e: certiqa::Error) -> Self {
        CliError::from_core(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "certiqa", version, about = "Certified no-reference quality assessment with denoised median smoothing")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Each maps onto the configuration key of
/// the same name and wins over `--config` and `--set`.
#[derive(Args, Debug)]
struct Global {
    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    seed: Option<String>,
    /// weak (σ=0.12, ε=0.06), strong (σ=0.18, ε=0.36) or custom.
    #[arg(long, global = true, allow_negative_numbers = true)]
    preset: Option<String>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    sigma: Option<String>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    eps: Option<String>,
    /// Number of noise samples.
    #[arg(long, global = true, allow_negative_numbers = true)]
    n: Option<String>,
    /// Size of the worker pool; results do not depend on it.
    #[arg(long, global = true, allow_negative_numbers = true)]
    workers: Option<String>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<String>,
    /// Miss probability for binomially adjusted certificate indices.
    #[arg(long, global = true, allow_negative_numbers = true)]
    confidence: Option<String>,
    #[arg(long = "mos-noise", global = true, allow_negative_numbers = true)]
    mos_noise: Option<String>,
    /// Denoiser base width.
    #[arg(long, global = true, allow_negative_numbers = true)]
    base: Option<String>,
    /// Number of images to process.
    #[arg(long, global = true, allow_negative_numbers = true)]
    images: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labelled dataset.
    GenData {
        #[arg(long)]
        count: Option<String>,
    },
    /// Train the quality metric.
    TrainMetric,
    /// Train a denoiser: MSE pretraining or composite fine-tuning.
    TrainDenoiser {
        #[arg(long, value_enum)]
        mode: Mode,
    },
    /// Certify images with median smoothing.
    Certify,
    /// Attack the undefended metric and score the attacks under every defense.
    Attack,
    /// Compare the undefended metric, MS, DMS and DMS-IQA.
    EvalCompare,
    /// Restore noisy images by optimizing pixels against a metric backend.
    Optimize {
        #[arg(long)]
        backend: Option<String>,
    },
    /// Hyperparameter grids.
    Sweep {
        #[arg(long, value_enum)]
        grid: Grid,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Mse,
    Composite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    Loss,
    Batch,
    EpsSigma,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainMetric => "train-metric",
            Command::TrainDenoiser { .. } => "train-denoiser",
            Command::Certify => "certify",
            Command::Attack => "attack",
            Command::EvalCompare => "eval-compare",
            Command::Optimize { .. } => "optimize",
            Command::Sweep { .. } => "sweep",
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => RunConfig::parse_file(p)?,
        None => RunConfig::default(),
    };
    for pair in &g.set {
        cfg.set_pair(pair)?;
    }
    let flags = [
        ("seed", &g.seed),
        ("preset", &g.preset),
        ("sigma", &g.sigma),
        ("eps", &g.eps),
        ("n", &g.n),
        ("workers", &g.workers),
        ("out", &g.out),
        ("confidence", &g.confidence),
        ("mos_noise", &g.mos_noise),
        ("base", &g.base),
        ("images", &g.images),
    ];
    for (key, v) in flags {
        if let Some(v) = v {
            cfg.set(key, v)?;
        }
    }
    match &cli.command {
        Command::GenData { count: Some(c) } => cfg.set("count", c)?,
        Command::Optimize { backend: Some(b) } => cfg.set("backend", b)?,
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let started = Instant::now();
    let cfg = build_config(&cli)?;
    let name = cli.command.name();
    if let Some(w) = cfg.opt::<usize>("workers")? {
        if w == 0 {
            return Err(CliError::Usage("workers: must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("workers: {e}")))?;
    }
    let out = cfg.out_dir();
    let mut run = commands::Run::new(out);
    match cli.command {
        Command::GenData { .. } => commands::gen_data(&cfg, &mut run)?,
        Command::TrainMetric => commands::train_metric(&cfg, &mut run)?,
        Command::TrainDenoiser { mode } => commands::train_denoiser(&cfg, &mut run, mode)?,
        Command::Certify => commands::certify(&cfg, &mut run)?,
        Command::Attack => commands::attack(&cfg, &mut run)?,
        Command::EvalCompare => commands::eval_compare(&cfg, &mut run)?,
        Command::Optimize { .. } => commands::optimize(&cfg, &mut run)?,
        Command::Sweep { grid } => commands::sweep(&cfg, &mut run, grid)?,
    }
    run.write_manifest(name, &cfg, started.elapsed().as_secs_f64())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap reports usage errors with code 2; this tool reserves 2 for
            // runtime failures.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
