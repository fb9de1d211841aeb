mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfirl_core::ExpertBlock;

/// Maximum causal entropy inverse RL for stationary mean-field games.
#[derive(Debug, Parser)]
#[command(name = "mfirl", version, about)]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(
        long,
        short = 'c',
        global = true,
        default_value = "configs/traffic.toml"
    )]
    pub config: PathBuf,

    /// Output directory; overrides `[output].dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Fix transition rows that miss summing to one by at most 1e-9.
    #[arg(long, global = true)]
    pub renormalize: bool,

    /// How the state block of the expert feature expectation is formed.
    #[arg(long, global = true, value_parser = parse_block)]
    pub expert_block: Option<ExpertBlock>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load the config and report every problem found.
    Validate,
    /// Soft-optimal value, Q and policy for a reward parameter file.
    Solve {
        /// Parameter file (JSON); a training result is accepted too. Zeros if omitted.
        #[arg(long)]
        theta: Option<PathBuf>,
    },
    /// Discounted occupation measure of the expert (or of the soft policy of `--theta`).
    Occupation {
        #[arg(long)]
        theta: Option<PathBuf>,
    },
    /// Gradient ascent on the expert log-likelihood.
    Train {
        #[arg(long)]
        log_every: Option<usize>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        /// Starting parameters; overrides `[train].theta0`.
        #[arg(long)]
        theta: Option<PathBuf>,
    },
    /// Sample demonstrations from the expert (or from the soft policy of `--theta`).
    GenDemos {
        #[arg(long, short = 'd', default_value_t = 1000)]
        num_trajectories: usize,
        #[arg(long, short = 'T', default_value_t = 50)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        theta: Option<PathBuf>,
    },
    /// Equilibrium diagnostics for learned parameters.
    Eval {
        #[arg(long)]
        theta: PathBuf,
        /// `expert`, `uniform`, or a JSON file holding a `policy` matrix.
        #[arg(long)]
        reference: Option<String>,
    },
}

fn parse_block(s: &str) -> Result<ExpertBlock, String> {
    s.parse().map_err(|e: mfirl_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Usage errors share the status of other input problems; 2 is
            // reserved for failures during computation.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
