//! Tabular two-stage policy trained with GRPO or GRPO-MA.
//!
//! Each step snapshots the current policy as the behavior policy, samples
//! one group per prompt, computes advantages and takes a single plain
//! gradient-ascent step on the mean per-prompt objective.

pub mod objective;
pub mod policy;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{compute_advantage_set, AdvantageSet};
use crate::envs::TokenTaskEnv;
use crate::error::{Error, Result};
use crate::metrics::{inconsistency_rate, StepRecord, TrainRunLog};
use crate::rng;
use crate::sampling::{sample_group_policy, GroupConfig};

pub use objective::{clip_objective, gradient_check, GradientCheck, grpo_ma_objective, grpo_objective, ClipParams, TokenSpan};
pub use policy::{PolicyGradient, ReferencePolicy, TwoStagePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One advantage per full response (M must be 1).
    Grpo,
    /// Separate thought and answer advantages.
    GrpoMa,
    /// Answer term only; the task has no thought tokens.
    NoThink,
}

impl Mode {
    /// GRPO for M = 1, GRPO-MA otherwise.
    pub fn for_group(g: GroupConfig) -> Mode {
        if g.is_multi_answer() {
            Mode::GrpoMa
        } else {
            Mode::Grpo
        }
    }
}

fn default_eps_low() -> f64 {
    0.2
}
fn default_eps_high() -> f64 {
    0.28
}
fn default_beta() -> f64 {
    0.04
}
fn default_lr() -> f64 {
    0.3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub group: GroupConfig,
    pub mode: Mode,
    #[serde(default = "default_eps_low")]
    pub eps_low: f64,
    #[serde(default = "default_eps_high")]
    pub eps_high: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for everything but the group shape, with the mode inferred
    /// from M.
    pub fn new(group: GroupConfig, steps: usize, seed: u64) -> Self {
        TrainConfig {
            group,
            mode: Mode::for_group(group),
            eps_low: default_eps_low(),
            eps_high: default_eps_high(),
            beta: default_beta(),
            learning_rate: default_lr(),
            steps,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, eps) in [("eps_low", self.eps_low), ("eps_high", self.eps_high)] {
            if !(eps > 0.0 && eps < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1), got {eps}")));
            }
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid("beta must be finite and >= 0"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be finite and > 0"));
        }
        match self.mode {
            Mode::Grpo if self.group.m != 1 => {
                Err(Error::invalid(format!("mode grpo requires M = 1, got {}", self.group)))
            }
            Mode::Grpo if self.group.k < 2 => Err(Error::invalid("mode grpo requires K >= 2")),
            _ if self.group.responses() < 2 => Err(Error::invalid("a group needs at least two responses")),
            _ => Ok(()),
        }
    }
}

struct PromptOutcome {
    objective: f64,
    grad: PolicyGradient,
    adv: AdvantageSet,
    total_reward: f64,
    responses: usize,
}

/// Trains a fresh uniform policy on `env` and returns the per-step log.
pub fn train(env: &TokenTaskEnv, cfg: &TrainConfig) -> Result<TrainRunLog> {
    Ok(train_policy(env, cfg)?.0)
}

/// As [`train`], also returning the final policy and the reference.
pub fn train_policy(env: &TokenTaskEnv, cfg: &TrainConfig) -> Result<(TrainRunLog, TwoStagePolicy, ReferencePolicy)> {
    cfg.validate()?;
    let spec = env.spec();
    if cfg.mode == Mode::NoThink && spec.thought_len != 0 {
        return Err(Error::invalid("mode no_think requires a task with thought_len = 0"));
    }
    let mut policy = TwoStagePolicy::uniform(spec.shape());
    let reference = ReferencePolicy::new(&policy);
    let prompts = spec.num_prompts;
    let mut records = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let step_seed = rng::derive_seed(cfg.seed, step as u64);
        let outcomes: Vec<PromptOutcome> = (0..prompts)
            .into_par_iter()
            .map(|prompt| {
                let mut stream = rng::child_stream(step_seed, prompt as u64);
                let rollout = sample_group_policy(&policy, env, prompt, cfg.group, &mut stream)?;
                let adv = compute_advantage_set(&rollout.rewards)?;
                let (objective, grad) = objective::objective_and_gradient(&rollout, &adv, &policy, &reference, cfg)?;
                Ok(PromptOutcome {
                    objective,
                    grad,
                    adv,
                    total_reward: rollout.rewards.total(),
                    responses: cfg.group.responses(),
                })
            })
            .collect::<Result<_>>()?;

        let scale = 1.0 / prompts as f64;
        let mut grad = PolicyGradient::zeros(policy.shape());
        let mut objective = 0.0;
        let mut reward_sum = 0.0;
        let mut responses = 0;
        let mut inconsistency = 0.0;
        let mut thought_abs = 0.0;
        let mut answer_abs = 0.0;
        for o in &outcomes {
            grad.add_scaled(&o.grad, scale);
            objective += scale * o.objective;
            reward_sum += o.total_reward;
            responses += o.responses;
            inconsistency += scale * inconsistency_rate(&o.adv);
            thought_abs += scale * abs_mean(&o.adv.thought_advantages);
            answer_abs += scale * abs_mean(o.adv.answer_advantages.as_slice());
        }
        let grad_norm = grad.l2_norm();
        check_finite(step, grad_norm, &policy)?;
        policy.apply(&grad, cfg.learning_rate);
        check_finite(step, 0.0, &policy)?;
        records.push(StepRecord {
            step,
            mean_reward: reward_sum / responses as f64,
            grad_norm,
            objective,
            thought_adv_abs_mean: thought_abs,
            answer_adv_abs_mean: answer_abs,
            inconsistency_rate: inconsistency,
            group_totals: outcomes.iter().map(|o| o.total_reward).collect(),
        });
    }

    let log = TrainRunLog {
        group: cfg.group,
        mode: cfg.mode,
        seed: cfg.seed,
        final_kl: policy.mean_kl(&reference),
        records,
    };
    Ok((log, policy, reference))
}

fn check_finite(step: usize, grad_norm: f64, policy: &TwoStagePolicy) -> Result<()> {
    if !grad_norm.is_finite() {
        return Err(Error::Divergence { step, detail: format!("gradient norm is {grad_norm}") });
    }
    if !policy.is_finite() {
        return Err(Error::Divergence { step, detail: "policy logits became non-finite".into() });
    }
    Ok(())
}

fn abs_mean(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x.abs()).sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::TokenTaskSpec;

    fn spec() -> TokenTaskSpec {
        TokenTaskSpec { num_prompts: 2, thought_vocab: 4, answer_vocab: 4, thought_len: 1, answer_len: 1, sparsity: 0.1 }
    }

    #[test]
    fn config_validation() {
        let g = |s: &str| s.parse::<GroupConfig>().unwrap();
        assert!(TrainConfig::new(g("T4A4"), 1, 0).validate().is_ok());
        let mut c = TrainConfig::new(g("T4A1"), 1, 0);
        assert_eq!(c.mode, Mode::Grpo);
        c.group = g("T4A2");
        assert!(c.validate().is_err());
        let c = TrainConfig::new(g("T1A1"), 1, 0);
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(g("T4A4"), 1, 0);
        c.eps_high = 1.0;
        assert!(c.validate().is_err());
        c.eps_high = 0.28;
        c.beta = -0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn saturated_task_stays_at_full_reward() {
        let env = TokenTaskEnv::generate(TokenTaskSpec { sparsity: 1.0, ..spec() }, 1).unwrap();
        for g in ["T4A1", "T4A4"] {
            let log = train(&env, &TrainConfig::new(g.parse().unwrap(), 20, 3)).unwrap();
            assert!(log.records.iter().all(|r| r.mean_reward == 1.0));
            assert!(log.records.iter().all(|r| r.grad_norm == 0.0));
        }
    }

    #[test]
    fn no_think_requires_thoughtless_task() {
        let env = TokenTaskEnv::generate(spec(), 1).unwrap();
        let mut c = TrainConfig::new("T1A16".parse().unwrap(), 2, 0);
        c.mode = Mode::NoThink;
        assert!(train(&env, &c).is_err());
        let env = TokenTaskEnv::generate(TokenTaskSpec { thought_len: 0, ..spec() }, 1).unwrap();
        let log = train(&env, &c).unwrap();
        assert_eq!(log.records.len(), 2);
    }

    #[test]
    fn replay_is_deterministic() {
        let env = TokenTaskEnv::generate(spec(), 4).unwrap();
        let c = TrainConfig::new("T4A4".parse().unwrap(), 30, 11);
        assert_eq!(train(&env, &c).unwrap(), train(&env, &c).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let mut p = TwoStagePolicy::uniform(spec().shape());
        assert!(check_finite(3, 1.0, &p).is_ok());
        assert!(matches!(check_finite(3, f64::NAN, &p), Err(Error::Divergence { step: 3, .. })));
        p.set_param(5, f64::INFINITY);
        assert!(matches!(check_finite(4, 1.0, &p), Err(Error::Divergence { step: 4, .. })));
    }
}
