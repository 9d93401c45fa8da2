//! Hierarchical K×M group sampling: K thoughts, then M answers per thought.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::envs::{AnalyticEnv, TokenTaskEnv};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Stream};
use crate::trainer::policy::TwoStagePolicy;

/// Group shape in TKAM form: `k` thoughts with `m` answers each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GroupConfig {
    pub k: usize,
    pub m: usize,
}

impl GroupConfig {
    pub fn new(k: usize, m: usize) -> Result<Self> {
        if k == 0 || m == 0 {
            return Err(Error::invalid(format!("group needs K >= 1 and M >= 1, got K={k}, M={m}")));
        }
        Ok(GroupConfig { k, m })
    }

    /// `M = 1` is plain GRPO.
    pub fn is_multi_answer(&self) -> bool {
        self.m > 1
    }

    pub fn responses(&self) -> usize {
        self.k * self.m
    }
}

impl fmt::Display for GroupConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}A{}", self.k, self.m)
    }
}

impl FromStr for GroupConfig {
    type Err = Error;

    /// Parses `T<K>A<M>`, e.g. `T4A4`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("expected TKAM notation like T4A4, got {s:?}"));
        let rest = s.trim().strip_prefix(['T', 't']).ok_or_else(bad)?;
        let (k, m) = rest.split_once(['A', 'a']).ok_or_else(bad)?;
        let k = k.parse().map_err(|_| bad())?;
        let m = m.parse().map_err(|_| bad())?;
        GroupConfig::new(k, m)
    }
}

impl TryFrom<String> for GroupConfig {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GroupConfig> for String {
    fn from(g: GroupConfig) -> String {
        g.to_string()
    }
}

/// K×M matrix of finite rewards R_{i,j}.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardMatrix(Matrix);

impl RewardMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::invalid("reward matrix must be non-empty"));
        }
        if values.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("rewards must be finite"));
        }
        Ok(RewardMatrix(values))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn k(&self) -> usize {
        self.0.rows()
    }

    pub fn m(&self) -> usize {
        self.0.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn values(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }
}

/// Log-probabilities of every sampled token under the sampling policy.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorLogprobs {
    pub thoughts: Vec<Vec<f64>>,
    pub answers: Vec<Vec<Vec<f64>>>,
}

/// One sampled group: tokens, rewards and behavior log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRollout {
    pub prompt: usize,
    pub rewards: RewardMatrix,
    /// K thought sequences (empty sequences in analytic or no-think mode).
    pub thoughts: Vec<Vec<usize>>,
    /// Answer-head context index of each thought.
    pub thought_contexts: Vec<usize>,
    /// `answers[i][j]` is the j-th answer sampled after thought i.
    pub answers: Vec<Vec<Vec<usize>>>,
    pub behavior_logprobs: Option<BehaviorLogprobs>,
}

impl GroupRollout {
    pub fn group(&self) -> GroupConfig {
        GroupConfig { k: self.rewards.k(), m: self.rewards.m() }
    }
}

/// Samples a K×M reward matrix with `thought_indices[i]` selecting the
/// reward law of row i. Each row draws from its own child stream of a group
/// seed taken from `rng`.
pub fn sample_group_analytic(
    env: &AnalyticEnv,
    cfg: GroupConfig,
    thought_indices: &[usize],
    rng: &mut Stream,
) -> Result<RewardMatrix> {
    if thought_indices.len() != cfg.k {
        return Err(Error::invalid(format!(
            "{} thought indices for K = {}",
            thought_indices.len(),
            cfg.k
        )));
    }
    if let Some(bad) = thought_indices.iter().find(|&&t| t >= env.k()) {
        return Err(Error::invalid(format!("thought index {bad} out of range for env K = {}", env.k())));
    }
    let group_seed = rng.next_u64();
    let mut values = Matrix::zeros(cfg.k, cfg.m);
    for (i, &t) in thought_indices.iter().enumerate() {
        let mut row_rng = rng::child_stream(group_seed, i as u64);
        for v in values.row_mut(i) {
            *v = env.draw(t, &mut row_rng);
        }
    }
    RewardMatrix::new(values)
}

/// Samples K thoughts from the thought head, then M answers per thought from
/// the answer head, and scores every pair with the task reward.
pub fn sample_group_policy(
    policy: &TwoStagePolicy,
    env: &TokenTaskEnv,
    prompt: usize,
    cfg: GroupConfig,
    rng: &mut Stream,
) -> Result<GroupRollout> {
    let shape = policy.shape();
    if *shape != env.spec().shape() {
        return Err(Error::invalid("policy shape does not match the task env"));
    }
    if prompt >= shape.num_prompts {
        return Err(Error::invalid(format!("prompt {prompt} out of range")));
    }
    let group_seed = rng.next_u64();
    let mut thought_rng = rng::child_stream(group_seed, u64::MAX);

    let mut thoughts = Vec::with_capacity(cfg.k);
    let mut thought_lp = Vec::with_capacity(cfg.k);
    let mut contexts = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        let (tokens, lps) = policy.sample_thought(prompt, &mut thought_rng);
        contexts.push(shape.thought_context(&tokens));
        thoughts.push(tokens);
        thought_lp.push(lps);
    }

    let mut rewards = Matrix::zeros(cfg.k, cfg.m);
    let mut answers = Vec::with_capacity(cfg.k);
    let mut answer_lp = Vec::with_capacity(cfg.k);
    for i in 0..cfg.k {
        let mut row_rng = rng::child_stream(group_seed, i as u64);
        let mut row = Vec::with_capacity(cfg.m);
        let mut row_lp = Vec::with_capacity(cfg.m);
        for j in 0..cfg.m {
            let (tokens, lps) = policy.sample_answer(prompt, contexts[i], &mut row_rng);
            rewards.set(i, j, env.task_reward(prompt, &thoughts[i], &tokens)?);
            row.push(tokens);
            row_lp.push(lps);
        }
        answers.push(row);
        answer_lp.push(row_lp);
    }

    Ok(GroupRollout {
        prompt,
        rewards: RewardMatrix::new(rewards)?,
        thoughts,
        thought_contexts: contexts,
        answers,
        behavior_logprobs: Some(BehaviorLogprobs { thoughts: thought_lp, answers: answer_lp }),
    })
}
