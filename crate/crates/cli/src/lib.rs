//! Command-line front-end: batch decomposition of a manifest, scoring against
//! ground truth, and per-sample inspection.

pub mod decompose;
pub mod eval;
pub mod inspect;
pub mod output;
pub mod serve;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use semconmf::{ComponentMode, MinMode, PenaltyKind, ReconReduction, SolverConfig};

use crate::decompose::SegmenterSpec;

pub const THREADS_ENV: &str = "SEMCONMF_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "semconmf",
    version,
    about = "Training-free audio-visual co-factorisation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decompose every sample of a manifest and write masks and records.
    Decompose(DecomposeArgs),
    /// Score decomposition outputs against ground-truth masks.
    Eval(EvalArgs),
    /// Write factor heatmaps and the descriptor table of one result.
    Inspect(InspectArgs),
    /// Serve the stub segmenter over stdin/stdout.
    #[command(hide = true)]
    ServeStub(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PenaltyArg {
    Ce,
    Kl,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MinModeArg {
    Min,
    Mean,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ComponentArg {
    Softmask,
    Factorrow,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReductionArg {
    Mean,
    Sum,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of factors.
    #[arg(long = "K", default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 125.0)]
    pub beta_p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta_temp: f64,
    #[arg(long, default_value_t = 1800)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.25)]
    pub lr: f64,
    /// Repeat for several runs per sample.
    #[arg(long = "seed", default_values_t = [0u64])]
    pub seeds: Vec<u64>,
    /// `stub` or `external:<command>`.
    #[arg(long, default_value = "stub")]
    pub segmenter: SegmenterSpec,
    #[arg(long, value_enum, default_value = "ce")]
    pub penalty: PenaltyArg,
    #[arg(long, value_enum, default_value = "min")]
    pub min_mode: MinModeArg,
    #[arg(long, value_enum, default_value = "softmask")]
    pub component_mode: ComponentArg,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, value_enum, default_value = "mean")]
    pub recon_reduction: ReductionArg,
    /// Parallel samples; defaults to the available cores.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Pixels per mask cell in PNG previews.
    #[arg(long, default_value_t = 16)]
    pub png_scale: u32,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = semconmf::metrics::DEFAULT_BETA_SQ)]
    pub beta_sq: f64,
    /// Binarisation threshold for soft masks.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Report directory; defaults to `<results>/eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub sample: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub png_scale: u32,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

impl DecomposeArgs {
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            k: self.k,
            beta_p: self.beta_p,
            beta_temp: self.beta_temp,
            learning_rate: self.lr,
            iterations: self.iters,
            seed: self.seeds.first().copied().unwrap_or(0),
            penalty_kind: match self.penalty {
                PenaltyArg::Ce => PenaltyKind::Ce,
                PenaltyArg::Kl => PenaltyKind::Kl,
            },
            min_mode: match self.min_mode {
                MinModeArg::Min => MinMode::Min,
                MinModeArg::Mean => MinMode::Mean,
            },
            component_mode: match self.component_mode {
                ComponentArg::Softmask => ComponentMode::SoftMask,
                ComponentArg::Factorrow => ComponentMode::FactorRow,
            },
            temperature: self.temperature,
            recon_reduction: match self.recon_reduction {
                ReductionArg::Mean => ReconReduction::Mean,
                ReductionArg::Sum => ReconReduction::Sum,
            },
        }
    }
}

/// `requested` (or the core count), capped by `cap` when set.
pub fn worker_count(requested: Option<usize>, cap: Option<&str>) -> Result<usize> {
    let base =
        requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let cap =
        match cap {
            Some(s) => Some(s.trim().parse::<usize>().map_err(|_| {
                anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got {s:?}")
            })?),
            None => None,
        };
    let n = cap.map_or(base, |c| base.min(c));
    anyhow::ensure!(n >= 1, "worker count must be at least 1");
    Ok(n)
}

/// Exit codes: 0 success, 1 some samples failed, 2 fatal error, 3 not found.
pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Decompose(args) => {
            let cap = std::env::var(THREADS_ENV).ok();
            let job = decompose::DecomposeJob {
                manifest: args.manifest.clone(),
                out: args.out.clone(),
                config: args.solver_config(),
                seeds: args.seeds.clone(),
                segmenter: args.segmenter.clone(),
                workers: worker_count(args.workers, cap.as_deref())?,
                png_scale: args.png_scale,
            };
            let failed = decompose::run(&job)?;
            Ok(if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Eval(args) => {
            let report = eval::run(&eval::EvalJob {
                results: args.results,
                manifest: args.manifest,
                beta_sq: args.beta_sq,
                threshold: args.threshold,
                out: args.out,
            })?;
            print!("{}", eval::render(&report));
            Ok(ExitCode::SUCCESS)
        }
        Command::Inspect(args) => {
            let out = inspect::run(&inspect::InspectJob {
                results: args.results,
                sample: args.sample,
                seed: args.seed,
                out: args.out,
                png_scale: args.png_scale,
            })?;
            println!(
                "{} heatmaps and {} written to {}",
                out.heatmaps.len(),
                out.table.display(),
                out.dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::ServeStub(args) => {
            let manifest = semconmf::Manifest::load(&args.manifest)?;
            let stdin = std::io::stdin().lock();
            let stdout = std::io::stdout().lock();
            serve::serve(&manifest, stdin, stdout)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
