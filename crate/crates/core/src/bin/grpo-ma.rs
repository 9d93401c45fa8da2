//! `grpo-ma` command-line tool.
//!
//! Exit status: 0 on success, 1 when a tolerance check fails (or a training
//! run diverges), 2 on configuration errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grpo_ma::runner::{self, Command, ExperimentConfig};
use grpo_ma::Error;

#[derive(Parser)]
#[command(name = "grpo-ma", version, about = "GRPO-MA variance checks and tabular training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compare delta-method variance predictions with Monte Carlo estimates.
    VerifyVariance(Common),
    /// Check closed-form gradients against finite differences.
    GradCheck(Common),
    /// Train one tabular policy on a sparse token task.
    Train(Common),
    /// Train several group shapes over paired seeds and aggregate metrics.
    Compare(Common),
    /// Covariance diagnostics of replicated thought-value vectors.
    Diagnostics(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML, or JSON with a .json extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to out/<command>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Overrides the command's primary tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
}

fn resolve(common: Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.out.is_some() {
        cfg.out = common.out;
    }
    if common.parallelism.is_some() {
        cfg.parallelism = common.parallelism;
    }
    if common.tolerance.is_some() {
        cfg.tolerance = common.tolerance;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Cmd::VerifyVariance(c) => (Command::VerifyVariance, c),
        Cmd::GradCheck(c) => (Command::GradCheck, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Compare(c) => (Command::Compare, c),
        Cmd::Diagnostics(c) => (Command::Diagnostics, c),
    };
    let result = resolve(common).and_then(|cfg| runner::run(command, &cfg));
    match result {
        Ok(outcome) => {
            println!("{}", outcome.message);
            println!("outputs written to {}", outcome.out_dir.display());
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("{command}: tolerance check failed");
                ExitCode::from(1)
            }
        }
        Err(e @ Error::Divergence { .. }) => {
            eprintln!("{command}: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{command}: {e}");
            ExitCode::from(2)
        }
    }
}
