//! Synthetic environments standing in for the policy and the reward function.
//!
//! [`AnalyticEnv`] exposes rewards with known per-thought mean and variance
//! for variance checks. [`TokenTaskEnv`] is a sparse lookup-table task over
//! short thought/answer token sequences used for training.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardFamily {
    Gaussian,
    Bernoulli,
}

/// Per-thought reward laws with known first two moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticEnv {
    family: RewardFamily,
    means: Vec<f64>,
    stddevs: Vec<f64>,
}

impl AnalyticEnv {
    pub fn gaussian(means: Vec<f64>, stddevs: Vec<f64>) -> Result<Self> {
        if means.len() != stddevs.len() {
            return Err(Error::invalid(format!(
                "{} means but {} stddevs",
                means.len(),
                stddevs.len()
            )));
        }
        Self::check_len(means.len())?;
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("thought means must be finite"));
        }
        if stddevs.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::invalid("thought stddevs must be finite and nonnegative"));
        }
        Ok(AnalyticEnv { family: RewardFamily::Gaussian, means, stddevs })
    }

    /// Gaussian rewards sharing one stddev.
    pub fn gaussian_uniform(means: Vec<f64>, stddev: f64) -> Result<Self> {
        let stddevs = vec![stddev; means.len()];
        Self::gaussian(means, stddevs)
    }

    /// Success probabilities; the variance is derived as μ(1−μ).
    pub fn bernoulli(means: Vec<f64>) -> Result<Self> {
        Self::check_len(means.len())?;
        if means.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("bernoulli means must lie in [0, 1]"));
        }
        let stddevs = means.iter().map(|p| (p * (1.0 - p)).sqrt()).collect();
        Ok(AnalyticEnv { family: RewardFamily::Bernoulli, means, stddevs })
    }

    fn check_len(k: usize) -> Result<()> {
        if k < 2 {
            return Err(Error::invalid(format!("analytic env needs K >= 2 thoughts, got {k}")));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn family(&self) -> RewardFamily {
        self.family
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stddevs(&self) -> &[f64] {
        &self.stddevs
    }

    /// True per-thought reward variances σ²_{R_k}.
    pub fn variances(&self) -> Vec<f64> {
        match self.family {
            RewardFamily::Gaussian => self.stddevs.iter().map(|s| s * s).collect(),
            RewardFamily::Bernoulli => self.means.iter().map(|p| p * (1.0 - p)).collect(),
        }
    }

    pub fn sample_reward(&self, thought_index: usize, rng: &mut Stream) -> Result<f64> {
        if thought_index >= self.k() {
            return Err(Error::invalid(format!(
                "thought index {thought_index} out of range for K = {}",
                self.k()
            )));
        }
        Ok(self.draw(thought_index, rng))
    }

    /// Unchecked draw for hot loops; `thought_index` must be valid.
    #[inline]
    pub(crate) fn draw(&self, thought_index: usize, rng: &mut Stream) -> f64 {
        let mu = self.means[thought_index];
        match self.family {
            RewardFamily::Gaussian => {
                let z: f64 = StandardNormal.sample(rng);
                mu + self.stddevs[thought_index] * z
            }
            RewardFamily::Bernoulli => {
                if rng.random::<f64>() < mu {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Population from which true thought values are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThoughtDistribution {
    pub mean_of_means: f64,
    pub stddev_of_means: f64,
}

impl ThoughtDistribution {
    pub fn new(mean_of_means: f64, stddev_of_means: f64) -> Result<Self> {
        if !(stddev_of_means >= 0.0) || !mean_of_means.is_finite() || !stddev_of_means.is_finite() {
            return Err(Error::invalid("thought distribution needs a finite mean and stddev >= 0"));
        }
        Ok(ThoughtDistribution { mean_of_means, stddev_of_means })
    }

    pub fn variance(&self) -> f64 {
        self.stddev_of_means * self.stddev_of_means
    }
}

/// Draws `k` i.i.d. Gaussian true thought values.
pub fn sample_thought_means(dist: &ThoughtDistribution, k: usize, rng: &mut Stream) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::invalid(format!("need K >= 2 thoughts, got {k}")));
    }
    let normal = Normal::new(dist.mean_of_means, dist.stddev_of_means)
        .map_err(|e| Error::invalid(e.to_string()))?;
    Ok((0..k).map(|_| normal.sample(rng)).collect())
}

/// Shape and generation parameters of a [`TokenTaskEnv`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenTaskSpec {
    pub num_prompts: usize,
    pub thought_vocab: usize,
    pub answer_vocab: usize,
    pub thought_len: usize,
    pub answer_len: usize,
    /// Fraction of (thought, answer) pairs rewarded per prompt.
    pub sparsity: f64,
}

impl Default for TokenTaskSpec {
    fn default() -> Self {
        TokenTaskSpec {
            num_prompts: 4,
            thought_vocab: 16,
            answer_vocab: 16,
            thought_len: 1,
            answer_len: 1,
            sparsity: 0.02,
        }
    }
}

impl TokenTaskSpec {
    pub fn shape(&self) -> TaskShape {
        TaskShape {
            num_prompts: self.num_prompts,
            thought_vocab: self.thought_vocab,
            answer_vocab: self.answer_vocab,
            thought_len: self.thought_len,
            answer_len: self.answer_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_prompts == 0 || self.answer_vocab == 0 || self.answer_len == 0 {
            return Err(Error::invalid("token task needs prompts, an answer vocabulary and answer_len >= 1"));
        }
        if self.thought_len > 0 && self.thought_vocab == 0 {
            return Err(Error::invalid("thought_len > 0 requires a thought vocabulary"));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::invalid(format!("sparsity must lie in (0, 1], got {}", self.sparsity)));
        }
        self.pair_count()?;
        Ok(())
    }

    /// Number of distinct thought sequences (1 when `thought_len` is 0).
    pub fn thought_space(&self) -> Result<u64> {
        checked_pow(self.thought_vocab, self.thought_len)
    }

    pub fn answer_space(&self) -> Result<u64> {
        checked_pow(self.answer_vocab, self.answer_len)
    }

    /// Number of (thought, answer) pairs per prompt.
    pub fn pair_count(&self) -> Result<u64> {
        self.thought_space()?
            .checked_mul(self.answer_space()?)
            .filter(|n| *n <= usize::MAX as u64)
            .ok_or_else(|| Error::invalid("token task pair space overflows"))
    }
}

/// Table dimensions shared by a task and the policies acting on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskShape {
    pub num_prompts: usize,
    pub thought_vocab: usize,
    pub answer_vocab: usize,
    pub thought_len: usize,
    pub answer_len: usize,
}

impl TaskShape {
    /// Number of answer-head contexts, one per distinct thought sequence.
    pub fn thought_contexts(&self) -> usize {
        self.thought_vocab.pow(self.thought_len as u32)
    }

    /// Mixed-radix index of a (valid) thought sequence.
    pub fn thought_context(&self, thought: &[usize]) -> usize {
        thought.iter().fold(0, |acc, &t| acc * self.thought_vocab + t)
    }
}

fn checked_pow(base: usize, exp: usize) -> Result<u64> {
    (base as u64)
        .checked_pow(exp as u32)
        .ok_or_else(|| Error::invalid(format!("{base}^{exp} overflows")))
}

/// Sparse reward table over (prompt, thought sequence, answer sequence).
#[derive(Debug, Clone)]
pub struct TokenTaskEnv {
    spec: TokenTaskSpec,
    rewards: HashMap<(usize, u64, u64), f64>,
}

impl TokenTaskEnv {
    /// Marks `max(1, round(sparsity · pairs))` distinct pairs per prompt with
    /// reward 1, chosen from a stream derived from `seed`.
    pub fn generate(spec: TokenTaskSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let pairs = spec.pair_count()?;
        let answers = spec.answer_space()?;
        let rewarded = ((spec.sparsity * pairs as f64).round() as usize).clamp(1, pairs as usize);
        let mut rewards = HashMap::new();
        for prompt in 0..spec.num_prompts {
            let mut rng = rng::child_stream(seed, prompt as u64);
            for pair in index::sample(&mut rng, pairs as usize, rewarded) {
                let pair = pair as u64;
                rewards.insert((prompt, pair / answers, pair % answers), 1.0);
            }
        }
        Ok(TokenTaskEnv { spec, rewards })
    }

    /// Builds an env from explicit `(prompt, thought, answer) → reward` entries.
    /// `spec.sparsity` is informational only here.
    pub fn from_entries<I>(spec: TokenTaskSpec, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = ((usize, Vec<usize>, Vec<usize>), f64)>,
    {
        spec.validate()?;
        let mut env = TokenTaskEnv { spec, rewards: HashMap::new() };
        for ((prompt, thought, answer), reward) in entries {
            if !reward.is_finite() {
                return Err(Error::invalid("rewards must be finite"));
            }
            let key = env.key(prompt, &thought, &answer)?;
            env.rewards.insert(key, reward);
        }
        for prompt in 0..spec.num_prompts {
            if env.rewarded_pairs(prompt) == 0 {
                return Err(Error::invalid(format!("prompt {prompt} has no positively rewarded pair")));
            }
        }
        Ok(env)
    }

    pub fn spec(&self) -> &TokenTaskSpec {
        &self.spec
    }

    pub fn task_reward(&self, prompt: usize, thought: &[usize], answer: &[usize]) -> Result<f64> {
        let key = self.key(prompt, thought, answer)?;
        Ok(self.rewards.get(&key).copied().unwrap_or(0.0))
    }

    /// Count of pairs with strictly positive reward for `prompt`.
    pub fn rewarded_pairs(&self, prompt: usize) -> usize {
        self.rewards.iter().filter(|(k, v)| k.0 == prompt && **v > 0.0).count()
    }

    /// Mixed-radix code of a thought sequence; this is also the answer-head
    /// context index.
    pub fn thought_code(&self, thought: &[usize]) -> Result<u64> {
        encode(thought, self.spec.thought_len, self.spec.thought_vocab, "thought")
    }

    fn key(&self, prompt: usize, thought: &[usize], answer: &[usize]) -> Result<(usize, u64, u64)> {
        if prompt >= self.spec.num_prompts {
            return Err(Error::invalid(format!("prompt {prompt} out of range")));
        }
        let t = self.thought_code(thought)?;
        let a = encode(answer, self.spec.answer_len, self.spec.answer_vocab, "answer")?;
        Ok((prompt, t, a))
    }
}

fn encode(tokens: &[usize], len: usize, vocab: usize, what: &str) -> Result<u64> {
    if tokens.len() != len {
        return Err(Error::invalid(format!("{what} has {} tokens, expected {len}", tokens.len())));
    }
    tokens.iter().try_fold(0u64, |acc, &tok| {
        if tok >= vocab {
            Err(Error::invalid(format!("{what} token {tok} outside vocabulary of {vocab}")))
        } else {
            Ok(acc * vocab as u64 + tok as u64)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::RunningStats;

    #[test]
    fn zero_spread_thought_means() {
        let d = ThoughtDistribution::new(0.5, 0.0).unwrap();
        let v = sample_thought_means(&d, 4, &mut rng::stream(1)).unwrap();
        assert_eq!(v, vec![0.5; 4]);
    }

    #[test]
    fn thought_means_deterministic_and_k_checked() {
        let d = ThoughtDistribution::new(0.0, 1.0).unwrap();
        let a = sample_thought_means(&d, 3, &mut rng::stream(9)).unwrap();
        let b = sample_thought_means(&d, 3, &mut rng::stream(9)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            sample_thought_means(&d, 1, &mut rng::stream(9)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn thought_means_sample_stddev() {
        let d = ThoughtDistribution::new(0.0, 1.0).unwrap();
        let v = sample_thought_means(&d, 100_000, &mut rng::stream(3)).unwrap();
        let s: RunningStats = v.into_iter().collect();
        assert!((s.variance().sqrt() - 1.0).abs() < 0.02);
    }

    #[test]
    fn degenerate_reward_laws() {
        let env = AnalyticEnv::gaussian(vec![0.3, 0.7], vec![0.0, 0.0]).unwrap();
        let mut r = rng::stream(0);
        for _ in 0..100 {
            assert_eq!(env.sample_reward(1, &mut r).unwrap(), 0.7);
        }
        let env = AnalyticEnv::bernoulli(vec![1.0, 0.0]).unwrap();
        for _ in 0..100 {
            assert_eq!(env.sample_reward(0, &mut r).unwrap(), 1.0);
            assert_eq!(env.sample_reward(1, &mut r).unwrap(), 0.0);
        }
    }

    #[test]
    fn bernoulli_mean_and_variance() {
        let env = AnalyticEnv::bernoulli(vec![0.3, 0.5]).unwrap();
        assert_eq!(env.variances(), vec![0.3 * 0.7, 0.25]);
        let mut r = rng::stream(11);
        let n = 100_000;
        let hits: f64 = (0..n).map(|_| env.sample_reward(0, &mut r).unwrap()).sum();
        assert!((hits / n as f64 - 0.3).abs() < 0.01);
    }

    #[test]
    fn reward_index_and_shape_errors() {
        let env = AnalyticEnv::gaussian_uniform(vec![0.0, 1.0], 1.0).unwrap();
        assert!(env.sample_reward(2, &mut rng::stream(0)).is_err());
        assert!(AnalyticEnv::gaussian(vec![0.0], vec![1.0]).is_err());
        assert!(AnalyticEnv::gaussian(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(AnalyticEnv::gaussian(vec![0.0, 1.0], vec![1.0, -1.0]).is_err());
        assert!(AnalyticEnv::bernoulli(vec![0.5, 1.5]).is_err());
    }

    fn tiny_spec() -> TokenTaskSpec {
        TokenTaskSpec { num_prompts: 1, thought_vocab: 8, answer_vocab: 8, thought_len: 1, answer_len: 1, sparsity: 0.1 }
    }

    #[test]
    fn lookup_and_default() {
        let env = TokenTaskEnv::from_entries(tiny_spec(), [((0, vec![3], vec![7]), 1.0)]).unwrap();
        assert_eq!(env.task_reward(0, &[3], &[7]).unwrap(), 1.0);
        assert_eq!(env.task_reward(0, &[3], &[6]).unwrap(), 0.0);
        assert!(env.task_reward(0, &[8], &[6]).is_err());
        assert!(env.task_reward(0, &[3, 1], &[6]).is_err());
        assert!(env.task_reward(1, &[3], &[6]).is_err());
    }

    #[test]
    fn every_prompt_needs_a_reward() {
        let spec = TokenTaskSpec { num_prompts: 2, ..tiny_spec() };
        assert!(TokenTaskEnv::from_entries(spec, [((0, vec![3], vec![7]), 1.0)]).is_err());
    }

    #[test]
    fn generated_sparsity() {
        let spec = TokenTaskSpec { num_prompts: 3, ..TokenTaskSpec::default() };
        let env = TokenTaskEnv::generate(spec, 5).unwrap();
        for p in 0..3 {
            // round(0.02 * 256) = 5
            assert_eq!(env.rewarded_pairs(p), 5);
        }
        let tiny = TokenTaskSpec { sparsity: 1e-6, ..spec };
        let env = TokenTaskEnv::generate(tiny, 5).unwrap();
        assert_eq!(env.rewarded_pairs(0), 1);
    }

    #[test]
    fn generation_is_a_pure_function_of_seed() {
        let spec = TokenTaskSpec::default();
        let a = TokenTaskEnv::generate(spec, 77).unwrap();
        let b = TokenTaskEnv::generate(spec, 77).unwrap();
        for t in 0..16 {
            for ans in 0..16 {
                assert_eq!(a.task_reward(2, &[t], &[ans]).unwrap(), b.task_reward(2, &[t], &[ans]).unwrap());
            }
        }
    }

    #[test]
    fn no_think_spec_has_single_thought_context() {
        let spec = TokenTaskSpec { thought_len: 0, ..TokenTaskSpec::default() };
        assert_eq!(spec.thought_space().unwrap(), 1);
        let env = TokenTaskEnv::generate(spec, 1).unwrap();
        assert_eq!(env.thought_code(&[]).unwrap(), 0);
    }
}
