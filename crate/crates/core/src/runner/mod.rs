//! Command implementations behind the `grpo-ma` binary.
//!
//! Every command reads an [`ExperimentConfig`], runs inside a worker pool of
//! the configured size and writes `report.csv`, `summary.json` and (where
//! there is something to plot) `curves.svg` to the output directory. Results
//! do not depend on the pool size.

pub mod config;
mod gradcheck;
pub mod report;
mod training;
mod variance;

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use config::ExperimentConfig;
pub use gradcheck::{cmd_grad_check, GradCheckRow, GradCheckSummary};
pub use report::Provenance;
pub use training::{cmd_compare, cmd_train, CompareRow, CompareSummary, PairStats, PairwiseStats, TrainSummary};
pub use variance::{
    cmd_diagnostics, cmd_verify_variance, AnswerLevelSummary, DiagnosticsSummary, LimitSummary, VarianceRow,
    VerifySummary,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    VerifyVariance,
    GradCheck,
    Train,
    Compare,
    Diagnostics,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::VerifyVariance => "verify-variance",
            Command::GradCheck => "grad-check",
            Command::Train => "train",
            Command::Compare => "compare",
            Command::Diagnostics => "diagnostics",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Result of one command: whether every tolerance held, and a short
/// human-readable digest.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub out_dir: PathBuf,
    pub message: String,
}

/// Runs `command` with the pool size, seed and output directory taken from
/// `cfg`.
pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out").join(command.name()));
    std::fs::create_dir_all(&out)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.parallelism {
        if n == 0 {
            return Err(Error::Config("parallelism must be >= 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| dispatch(command, cfg, &out))
}

fn dispatch(command: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let (passed, message) = match command {
        Command::VerifyVariance => {
            let s = cmd_verify_variance(cfg, out)?;
            (s.passed, s.digest())
        }
        Command::GradCheck => {
            let s = cmd_grad_check(cfg, out)?;
            (s.passed, s.digest())
        }
        Command::Train => {
            let s = cmd_train(cfg, out)?;
            (true, s.digest())
        }
        Command::Compare => {
            let s = cmd_compare(cfg, out)?;
            (true, s.digest())
        }
        Command::Diagnostics => {
            let s = cmd_diagnostics(cfg, out)?;
            (true, s.digest())
        }
    };
    Ok(Outcome { passed, out_dir: out.to_path_buf(), message })
}

pub(crate) fn provenance(cfg: &ExperimentConfig) -> Provenance {
    Provenance { config_hash: cfg.hash(), seed: cfg.seed }
}

/// Turns library argument errors raised while reading a config section into
/// configuration errors.
pub(crate) fn as_config<T>(section: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidArgument(m) | Error::DegeneratePopulation(m) => Error::Config(format!("[{section}]: {m}")),
        other => other,
    })
}
