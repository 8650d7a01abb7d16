//! `pacbayes`: train, optimize and certify PAC-Bayes bounds on binary MNIST.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod run;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pacbayes_core::Error as CoreError;

use crate::config::{ExperimentConfig, DATA_DIR_ENV};

#[derive(Parser)]
#[command(name = "pacbayes", version, about = "PAC-Bayes bounds for stochastic ReLU networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize a network and train it with momentum SGD.
    Train(TrainArgs),
    /// Optimize a Gaussian posterior around the trained network.
    OptimizeBound(OptimizeArgs),
    /// Estimate the posterior's error and certify the bound.
    Certify(CertifyArgs),
    /// Path-norm regularized training and margin-bound traces.
    Pathnorm(PathnormArgs),
    /// Collect certified reports from run directories into one table.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
pub struct CommonArgs {
    /// TOML config files, applied in order over the defaults.
    #[arg(long = "config", value_name = "FILE")]
    pub configs: Vec<PathBuf>,
    /// Run directory (default: runs/<name>).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Directory holding the four MNIST IDX files.
    #[arg(long, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    /// Layer widths, e.g. 784,600,1.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Labels {
    True,
    Random,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub labels: Option<Labels>,
    /// Keep only the first N training examples.
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long)]
    pub init_sigma: Option<f64>,
    /// Continue from the run directory's SGD checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Variant {
    SquareRoot,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SigmaInitArg {
    AbsWeights,
    AbsWeightsOverTen,
}

#[derive(Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Learning rate, or a schedule `rate:iters,rate:iters`.
    #[arg(long)]
    pub lr: Option<String>,
    /// Rows per iteration instead of the full training set.
    #[arg(long)]
    pub minibatch: Option<usize>,
    /// Noise draws per iteration.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    #[arg(long, value_enum)]
    pub sigma_init: Option<SigmaInitArg>,
    #[arg(long)]
    pub rho_init: Option<f64>,
    #[arg(long)]
    pub trace_every: Option<usize>,
    /// Write the posterior checkpoint every this many iterations.
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: usize,
    /// Continue from the run directory's posterior checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args)]
pub struct CertifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Monte-Carlo networks for the training error.
    #[arg(long)]
    pub n: Option<u64>,
    /// Monte-Carlo networks for the test error.
    #[arg(long)]
    pub n_test: Option<u64>,
    #[arg(long)]
    pub delta_prime: Option<f64>,
    /// Draws for the p-value diagnostic (0 skips it).
    #[arg(long)]
    pub pvalue_samples: Option<u64>,
    /// Exit 0 even when the bound is vacuous.
    #[arg(long)]
    pub allow_vacuous: bool,
}

#[derive(Args)]
pub struct PathnormArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Regularization strengths (repeatable).
    #[arg(long = "rho")]
    pub rhos: Vec<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long)]
    pub init_sigma: Option<f64>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Run directories holding report.json.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// CSV file for the combined table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure classes with their own exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    Config,
    Data,
    Numerical,
    Vacuous,
}

impl Failure {
    fn code(self) -> u8 {
        match self {
            Failure::Config => 2,
            Failure::Data => 3,
            Failure::Numerical => 4,
            Failure::Vacuous => 5,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Failure::Config => "configuration error",
            Failure::Data => "data error",
            Failure::Numerical => "numerical failure",
            Failure::Vacuous => "certified bound is vacuous",
        })
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(f) = err.downcast_ref::<Failure>() {
        return f.code();
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Diverged { .. } | CoreError::ObjectiveDiverged { .. } | CoreError::NonFinite(_) => {
                    Failure::Numerical.code()
                }
                CoreError::Idx { .. } | CoreError::EmptyDataset => Failure::Data.code(),
                CoreError::Architecture(_) | CoreError::InvalidArgument { .. } => Failure::Config.code(),
                _ => 1,
            };
        }
    }
    1
}

/// Resolved config for a command: defaults, the run directory's saved config,
/// `--config` files, then the shared flags.
pub fn resolve_common(common: &CommonArgs) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let base = ExperimentConfig::layered(&common.configs)?;
    let name = common.name.clone().unwrap_or(base.name.clone());
    let run_dir = common
        .run_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&name));
    let saved = run_dir.join(run::CONFIG_FILE);
    let mut files = Vec::new();
    if saved.exists() {
        files.push(saved);
    }
    files.extend(common.configs.iter().cloned());
    let mut cfg = ExperimentConfig::layered(&files)?;
    cfg.name = name;
    if let Some(a) = &common.arch {
        cfg.arch = a.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.data_dir {
        cfg.data.dir = Some(d.clone());
    }
    Ok((cfg, run_dir))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::OptimizeBound(a) => commands::optimize_bound(a),
        Command::Certify(a) => commands::certify(a),
        Command::Pathnorm(a) => commands::pathnorm(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
