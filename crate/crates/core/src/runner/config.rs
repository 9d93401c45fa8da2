//! Experiment configuration.
//!
//! One TOML document with a section per concern; the same schema is accepted
//! as JSON when the file name ends in `.json`. See `docs/config.md`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{AnalyticEnv, RewardFamily, TokenTaskEnv, TokenTaskSpec};
use crate::error::{Error, Result};
use crate::rng;
use crate::sampling::GroupConfig;
use crate::trainer::{Mode, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream is derived from it.
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; defaults to the number of logical CPUs.
    pub parallelism: Option<usize>,
    pub out: Option<PathBuf>,
    /// Overrides the command's primary tolerance.
    pub tolerance: Option<f64>,
    pub env: Option<AnalyticEnvConfig>,
    pub verify: Option<VerifyConfig>,
    pub grad_check: Option<GradCheckConfig>,
    pub task: Option<TaskConfig>,
    pub train: Option<TrainSection>,
    pub compare: Option<CompareConfig>,
    pub diagnostics: Option<DiagnosticsConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Linspace {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

impl Linspace {
    pub fn values(&self) -> Vec<f64> {
        match self.count {
            0 => vec![],
            1 => vec![self.start],
            n => (0..n).map(|i| self.start + (self.end - self.start) * i as f64 / (n - 1) as f64).collect(),
        }
    }
}

/// Thought population for the analytic environment. Give either explicit
/// `means` or a `linspace`, and either one `stddev` or per-thought `stddevs`
/// (Gaussian only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticEnvConfig {
    #[serde(default = "default_family")]
    pub family: RewardFamily,
    pub means: Option<Vec<f64>>,
    pub linspace: Option<Linspace>,
    pub stddev: Option<f64>,
    pub stddevs: Option<Vec<f64>>,
}

fn default_family() -> RewardFamily {
    RewardFamily::Gaussian
}

impl AnalyticEnvConfig {
    pub fn build(&self) -> Result<AnalyticEnv> {
        let means = match (&self.means, &self.linspace) {
            (Some(m), None) => m.clone(),
            (None, Some(l)) => l.values(),
            _ => return Err(Error::Config("[env] needs exactly one of `means` or `linspace`".into())),
        };
        let env = match self.family {
            RewardFamily::Bernoulli => {
                if self.stddev.is_some() || self.stddevs.is_some() {
                    return Err(Error::Config("bernoulli rewards take no stddev".into()));
                }
                AnalyticEnv::bernoulli(means)
            }
            RewardFamily::Gaussian => match (self.stddev, &self.stddevs) {
                (Some(s), None) => AnalyticEnv::gaussian_uniform(means, s),
                (None, Some(s)) => AnalyticEnv::gaussian(means, s.clone()),
                _ => return Err(Error::Config("gaussian [env] needs exactly one of `stddev` or `stddevs`".into())),
            },
        };
        env.map_err(|e| Error::Config(format!("[env]: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub m_values: Vec<usize>,
    pub replications: usize,
    /// Also run the answer-level comparison at every M.
    #[serde(default)]
    pub answers: bool,
    pub limit: Option<LimitSection>,
}

/// Large-K limit check with one pinned thought and redrawn peers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitSection {
    pub k_values: Vec<usize>,
    pub m: usize,
    pub mean_of_means: f64,
    pub stddev_of_means: f64,
    pub reward_stddev: f64,
    /// Mean reward of the pinned thought; defaults to `mean_of_means`.
    pub pinned_mean: Option<f64>,
    pub replications: usize,
    #[serde(default = "default_limit_tolerance")]
    pub tolerance: f64,
}

fn default_limit_tolerance() -> f64 {
    0.10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub adv_step: f64,
    pub adv_tolerance: f64,
    pub objective_step: f64,
    pub objective_tolerance: f64,
    pub prompts: usize,
    pub vocab: usize,
    pub length: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            trials: 100,
            k_min: 3,
            k_max: 10,
            adv_step: 1e-5,
            adv_tolerance: 1e-6,
            objective_step: 1e-6,
            objective_tolerance: 1e-5,
            prompts: 2,
            vocab: 4,
            length: 2,
        }
    }
}

/// Sparse token task. Omitting `seed` derives one per training seed, so
/// paired runs in a comparison share their task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub num_prompts: usize,
    pub thought_vocab: usize,
    pub answer_vocab: usize,
    pub thought_len: usize,
    pub answer_len: usize,
    pub sparsity: f64,
    pub seed: Option<u64>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        let s = TokenTaskSpec::default();
        TaskConfig {
            num_prompts: s.num_prompts,
            thought_vocab: s.thought_vocab,
            answer_vocab: s.answer_vocab,
            thought_len: s.thought_len,
            answer_len: s.answer_len,
            sparsity: s.sparsity,
            seed: None,
        }
    }
}

const TASK_STREAM: u64 = 0x7a5c;

impl TaskConfig {
    pub fn spec(&self) -> TokenTaskSpec {
        TokenTaskSpec {
            num_prompts: self.num_prompts,
            thought_vocab: self.thought_vocab,
            answer_vocab: self.answer_vocab,
            thought_len: self.thought_len,
            answer_len: self.answer_len,
            sparsity: self.sparsity,
        }
    }

    pub fn build(&self, run_seed: u64) -> Result<TokenTaskEnv> {
        let seed = self.seed.unwrap_or_else(|| rng::derive_seed(run_seed, TASK_STREAM));
        TokenTaskEnv::generate(self.spec(), seed).map_err(|e| Error::Config(format!("[task]: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Required by `train`; `compare` takes its groups from `[compare]`.
    pub group: Option<GroupConfig>,
    pub mode: Option<Mode>,
    pub eps_low: Option<f64>,
    pub eps_high: Option<f64>,
    pub beta: Option<f64>,
    pub learning_rate: Option<f64>,
    pub steps: usize,
    #[serde(default = "default_window")]
    pub smoothing_window: usize,
}

fn default_window() -> usize {
    200
}

impl TrainSection {
    pub fn train_config(&self, group: GroupConfig, seed: u64) -> Result<TrainConfig> {
        let mut c = TrainConfig::new(group, self.steps, seed);
        if let Some(m) = self.mode {
            c.mode = m;
        }
        c.eps_low = self.eps_low.unwrap_or(c.eps_low);
        c.eps_high = self.eps_high.unwrap_or(c.eps_high);
        c.beta = self.beta.unwrap_or(c.beta);
        c.learning_rate = self.learning_rate.unwrap_or(c.learning_rate);
        if self.steps == 0 {
            return Err(Error::Config("[train] steps must be >= 1".into()));
        }
        if self.smoothing_window == 0 {
            return Err(Error::Config("[train] smoothing_window must be >= 1".into()));
        }
        c.validate().map_err(|e| Error::Config(format!("[train]: {e}")))?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub pairs: Vec<GroupConfig>,
    /// Replication seeds. Empty means `count` seeds derived from the master
    /// seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_seed_count")]
    pub count: usize,
}

fn default_seed_count() -> usize {
    10
}

impl CompareConfig {
    pub fn seeds(&self, master: u64) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.count as u64).map(|i| rng::derive_seed(master, i)).collect()
        } else {
            self.seeds.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub m: usize,
    pub replications: usize,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the resolved configuration, excluding settings that do not
    /// affect results (parallelism and output directory).
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig { parallelism: None, out: None, ..self.clone() };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn section<'a, T>(&self, value: &'a Option<T>, name: &str) -> Result<&'a T> {
        value.as_ref().ok_or_else(|| Error::Config(format!("this command needs a [{name}] section")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 7

[env]
linspace = { start = 0.0, end = 1.0, count = 8 }
stddev = 0.2

[verify]
m_values = [1, 2]
replications = 1000
"#;

    #[test]
    fn toml_and_json_agree() {
        let a = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let json = serde_json::to_string(&a).unwrap();
        let b = ExperimentConfig::from_json(&json).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        let env = a.env.unwrap().build().unwrap();
        assert_eq!(env.k(), 8);
        assert_eq!(env.means()[7], 1.0);
    }

    #[test]
    fn hash_ignores_parallelism_and_out() {
        let a = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let b = ExperimentConfig { parallelism: Some(8), out: Some("x".into()), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig { seed: 8, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("sed = 1").is_err());
        assert!(matches!(ExperimentConfig::from_toml("[env]\nmeans = [0.0]\nstdev = 1.0"), Err(Error::Config(_))));
    }

    #[test]
    fn env_section_needs_one_source() {
        let both = AnalyticEnvConfig {
            family: RewardFamily::Gaussian,
            means: Some(vec![0.0, 1.0]),
            linspace: Some(Linspace { start: 0.0, end: 1.0, count: 2 }),
            stddev: Some(1.0),
            stddevs: None,
        };
        assert!(both.build().is_err());
    }

    #[test]
    fn compare_seeds_are_derived_when_absent() {
        let c = CompareConfig { pairs: vec![], seeds: vec![], count: 3 };
        let s = c.seeds(1);
        assert_eq!(s.len(), 3);
        assert_eq!(s, c.seeds(1));
        assert_ne!(s, c.seeds(2));
    }
}
