use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use commands::{FitArgs, PenaltyArgs, ReproduceArgs, SelectArgs};

#[derive(Parser)]
#[command(name = "pesca", version, about = "Penalized exponential-family SCA for multi-block data")]
struct Cli {
    /// Log progress to stderr (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct PenaltyFlags {
    /// Penalty family: gdp, lq or lasso.
    #[arg(long)]
    penalty: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
}

impl From<PenaltyFlags> for PenaltyArgs {
    fn from(f: PenaltyFlags) -> Self {
        PenaltyArgs { penalty: f.penalty, gamma: f.gamma, q: f.q }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate three coupled blocks with known structure.
    Simulate {
        /// Benchmark preset such as ggg-case3.
        #[arg(long)]
        preset: Option<String>,
        /// JSON simulation spec instead of a preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the noise variance of every Gaussian block.
    EstimateDispersion {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit at fixed penalty strengths.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// One λ for every block.
        #[arg(long)]
        lambda: Option<f64>,
        /// Comma-separated per-block λ.
        #[arg(long)]
        lambdas: Option<String>,
        #[command(flatten)]
        penalty: PenaltyFlags,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Choose λ by cross-validation and refit.
    Select {
        #[arg(long)]
        config: PathBuf,
        /// Grid for quantitative blocks (or all blocks of one type), lo:hi:n.
        #[arg(long)]
        grid: Option<String>,
        /// Grid for binary blocks, lo:hi:n.
        #[arg(long)]
        grid_binary: Option<String>,
        #[command(flatten)]
        penalty: PenaltyFlags,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a model bundle against a simulation truth bundle.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat simulate, estimate, select and evaluate over seeds.
    Reproduce {
        /// Type mix: ggg, bbb, gbb or ggb.
        #[arg(long)]
        preset: String,
        /// Comma-separated cases, or "all".
        #[arg(long, default_value = "all")]
        cases: String,
        #[arg(long, default_value = "desk")]
        scale: String,
        /// Number of repetitions (default depends on scale).
        #[arg(long)]
        seeds: Option<usize>,
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the simulated dispersions instead of estimating them.
        #[arg(long)]
        known_alpha: bool,
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        grid_binary: Option<String>,
        #[command(flatten)]
        penalty: PenaltyFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { preset, config, seed, out } => commands::simulate(preset, config, seed, out),
        Command::EstimateDispersion { config, seed, out } => commands::estimate_dispersion_cmd(config, seed, out),
        Command::Fit { config, lambda, lambdas, penalty, seed, out } => {
            commands::fit_cmd(FitArgs { config, lambda, lambdas, penalty: penalty.into(), seed, out })
        }
        Command::Select { config, grid, grid_binary, penalty, seed, out } => {
            commands::select_cmd(SelectArgs { config, grid, grid_binary, penalty: penalty.into(), seed, out })
        }
        Command::Evaluate { model, truth, out } => commands::evaluate_cmd(model, truth, out),
        Command::Reproduce { preset, cases, scale, seeds, seed, known_alpha, grid, grid_binary, penalty, out } => {
            commands::reproduce_cmd(ReproduceArgs {
                preset,
                cases,
                scale,
                seeds,
                seed,
                known_alpha,
                grid,
                grid_binary,
                penalty: penalty.into(),
                out,
            })
        }
    }
}

/// 3 for numerical failures anywhere in the chain, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| e.downcast_ref::<pesca::Error>().is_some_and(|p| p.is_numerical()));
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
