//! Clipped surrogate objectives and their exact gradients.
//!
//! For a span y with advantage A,
//!
//! ```text
//! J(y) = 1/|y| Σ_t [ min(r_t A, clip(r_t, 1−ε_low, 1+ε_high) A) − β KL_t ]
//! ```
//!
//! with `r_t = π(y_t|ctx)/π_behavior(y_t|ctx)` and `KL_t` the exact
//! categorical KL(π(·|ctx) ‖ π_ref(·|ctx)). GRPO applies one advantage to the
//! concatenated thought+answer span of each response; GRPO-MA sums a thought
//! term (1/K Σ_i J(th_i)) and an answer term (1/(KM) Σ_ij J(ans_ij)).

use crate::advantage::AdvantageSet;
use crate::error::{Error, Result};
use crate::sampling::GroupRollout;

use super::policy::{categorical_kl, PolicyGradient, ReferencePolicy, Slot, TwoStagePolicy};
use super::{Mode, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipParams {
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
}

impl From<&TrainConfig> for ClipParams {
    fn from(c: &TrainConfig) -> Self {
        ClipParams { eps_low: c.eps_low, eps_high: c.eps_high, beta: c.beta }
    }
}

/// A token sequence with the distribution each token was drawn from and,
/// once sampled, its behavior log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSpan {
    tokens: Vec<(Slot, usize)>,
    behavior_logprobs: Option<Vec<f64>>,
}

impl TokenSpan {
    pub fn new(tokens: Vec<(Slot, usize)>, behavior_logprobs: Option<Vec<f64>>) -> Self {
        TokenSpan { tokens, behavior_logprobs }
    }

    pub fn thought(prompt: usize, thought: &[usize], logprobs: Option<&[f64]>) -> Self {
        let tokens = thought.iter().enumerate().map(|(pos, &t)| (Slot::Thought { prompt, pos }, t)).collect();
        TokenSpan::new(tokens, logprobs.map(<[f64]>::to_vec))
    }

    pub fn answer(prompt: usize, context: usize, answer: &[usize], logprobs: Option<&[f64]>) -> Self {
        let tokens =
            answer.iter().enumerate().map(|(pos, &t)| (Slot::Answer { prompt, context, pos }, t)).collect();
        TokenSpan::new(tokens, logprobs.map(<[f64]>::to_vec))
    }

    pub fn concat(mut self, other: TokenSpan) -> Self {
        self.tokens.extend(other.tokens);
        self.behavior_logprobs = match (self.behavior_logprobs, other.behavior_logprobs) {
            (Some(mut a), Some(b)) => {
                a.extend(b);
                Some(a)
            }
            _ => None,
        };
        self
    }

    /// Records behavior log-probabilities from `behavior`.
    pub fn with_behavior(mut self, behavior: &TwoStagePolicy) -> Self {
        self.behavior_logprobs = Some(self.tokens.iter().map(|&(slot, t)| behavior.log_prob(slot, t)).collect());
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn j_clip(
    current: &TwoStagePolicy,
    reference: &ReferencePolicy,
    span: &TokenSpan,
    advantage: f64,
    params: &ClipParams,
    mut grad: Option<(&mut PolicyGradient, f64)>,
) -> Result<f64> {
    if span.is_empty() {
        return Err(Error::invalid("clipped objective needs a non-empty span"));
    }
    let behavior = span
        .behavior_logprobs
        .as_ref()
        .ok_or_else(|| Error::invalid("span has no recorded behavior log-probabilities"))?;
    if behavior.len() != span.len() {
        return Err(Error::invalid("behavior log-probabilities do not match the span length"));
    }
    let inv_len = 1.0 / span.len() as f64;
    let (lo, hi) = (1.0 - params.eps_low, 1.0 + params.eps_high);
    let mut total = 0.0;
    for (&(slot, tok), &lp_b) in span.tokens.iter().zip(behavior) {
        let lp = current.log_probs(slot);
        let lq = reference.log_probs(slot);
        let r = (lp[tok] - lp_b).exp();
        let unclipped = r * advantage;
        let clipped = r.clamp(lo, hi) * advantage;
        let kl = categorical_kl(&lp, &lq);
        total += unclipped.min(clipped) - params.beta * kl;

        if let Some((g, weight)) = grad.as_mut() {
            let w = *weight * inv_len;
            let row = current.grad_slice(g, slot);
            // The unclipped branch is active (and differentiable in r) when
            // it is the smaller one; otherwise the clipped value is constant.
            let surrogate_active = unclipped <= clipped && advantage != 0.0;
            for (v, out) in row.iter_mut().enumerate() {
                let p = lp[v].exp();
                let mut d = 0.0;
                if surrogate_active {
                    let onehot = if v == tok { 1.0 } else { 0.0 };
                    d += advantage * r * (onehot - p);
                }
                if params.beta != 0.0 && p > 0.0 {
                    d -= params.beta * p * (lp[v] - lq[v] - kl);
                }
                *out += w * d;
            }
        }
    }
    Ok(total * inv_len)
}

/// Clipped surrogate for one span.
pub fn clip_objective(
    current: &TwoStagePolicy,
    reference: &ReferencePolicy,
    span: &TokenSpan,
    advantage: f64,
    params: &ClipParams,
) -> Result<f64> {
    j_clip(current, reference, span, advantage, params, None)
}

/// Clipped surrogate for one span; adds `weight · ∇J` into `grad`.
pub fn clip_objective_grad(
    current: &TwoStagePolicy,
    reference: &ReferencePolicy,
    span: &TokenSpan,
    advantage: f64,
    params: &ClipParams,
    grad: &mut PolicyGradient,
    weight: f64,
) -> Result<f64> {
    j_clip(current, reference, span, advantage, params, Some((grad, weight)))
}

fn behavior(rollout: &GroupRollout) -> Result<&crate::sampling::BehaviorLogprobs> {
    rollout
        .behavior_logprobs
        .as_ref()
        .ok_or_else(|| Error::invalid("rollout has no behavior log-probabilities"))
}

fn check_shapes(rollout: &GroupRollout, adv: &AdvantageSet) -> Result<()> {
    let g = rollout.group();
    if adv.thought_advantages.len() != g.k
        || adv.answer_advantages.rows() != g.k
        || adv.answer_advantages.cols() != g.m
        || rollout.thoughts.len() != g.k
        || rollout.answers.len() != g.k
        || rollout.answers.iter().any(|row| row.len() != g.m)
    {
        return Err(Error::invalid("rollout and advantage shapes disagree"));
    }
    Ok(())
}

fn grpo_impl(
    rollout: &GroupRollout,
    adv: &AdvantageSet,
    current: &TwoStagePolicy,
    reference: &ReferencePolicy,
    cfg: &TrainConfig,
    mut grad: Option<&mut PolicyGradient>,
) -> Result<f64> {
    if cfg.mode != Mode::Grpo {
        return Err(Error::invalid("GRPO objective requires mode grpo"));
    }
    check_shapes(rollout, adv)?;
    let g = rollout.group();
    if g.m != 1 {
        return Err(Error::invalid(format!("GRPO objective requires M = 1, got M = {}", g.m)));
    }
    if g.k < 2 {
        return Err(Error::invalid("GRPO objective requires K >= 2"));
    }
    let lps = behavior(rollout)?;
    let params = ClipParams::from(cfg);
    let w = 1.0 / g.k as f64;
    let mut total = 0.0;
    for i in 0..g.k {
        let span = TokenSpan::thought(rollout.prompt, &rollout.thoughts[i], Some(&lps.thoughts[i])).concat(
            TokenSpan::answer(rollout.prompt, rollout.thought_contexts[i], &rollout.answers[i][0], Some(&lps.answers[i][0])),
        );
        let a = adv.thought_advantages[i];
        total += w * j_clip(current, reference, &span, a, &params, grad.as_deref_mut().map(|g| (g, w)))?;
    }
    Ok(total)
}

fn grpo_ma_impl(
    rollout: &GroupRollout,
    adv: &AdvantageSet,
    current: &TwoStagePolicy,
    reference: &ReferencePolicy,
    cfg: &TrainConfig,
    mut grad: Option<&mut PolicyGradient>,
) -> Result<f64> {
    if cfg.mode == Mode::Grpo {
        return Err(Error::invalid("GRPO-MA objective requires mode grpo_ma or no_think"));
    }
    check_shapes(rollout, adv)?;
    let g = rollout.group();
    let lps = behavior(rollout)?;
    let params = ClipParams::from(cfg);
    let mut total = 0.0;

    let thought_term = cfg.mode == Mode::GrpoMa && rollout.thoughts.iter().any(|t| !t.is_empty());
    if thought_term {
        let w = 1.0 / g.k as f64;
        for i in 0..g.k {
            let span = TokenSpan::thought(rollout.prompt, &rollout.thoughts[i], Some(&lps.thoughts[i]));
            let a = adv.thought_advantages[i];
            total += w * j_clip(current, reference, &span, a, &params, grad.as_deref_mut().map(|g| (g, w)))?;
        }
    }

    let w = 1.0 / g.responses() as f64;
    for i in 0..g.k {
        for j in 0..g.m {
            let span = TokenSpan::answer(
                rollout.prompt,
                rollout.thought_contexts[i],
                &rollout.answers[i][j],
                Some(&lps.answers[i][j]),
            );
            let a = adv.answer_advantages.get(i, j);
            total += w * j_clip(current, reference, &span, a, &params, grad.as_deref_mut().map(|g| (g, w)))?;
        }
    }
    Ok(total)
}

/// GRPO objective: mean clipped surrogate over the K full responses.
pub fn grpo_objective(
    rollout: &GroupRollout,
    adv: &AdvantageSet,
    current: &TwoStagePolicy,
    reference: &ReferencePolicy,
    cfg: &TrainConfig,
) -> Result<f64> {
    grpo_impl(rollout, adv, current, reference, cfg, None)
}

/// GRPO-MA objective: thought term plus answer term. In no-think mode (or
/// when thoughts are empty) only the answer term remains.
pub fn grpo_ma_objective(
    rollout: &GroupRollout,
    adv: &AdvantageSet,
    current: &TwoStagePolicy,
    reference: &ReferencePolicy,
    cfg: &TrainConfig,
) -> Result<f64> {
    grpo_ma_impl(rollout, adv, current, reference, cfg, None)
}

/// Objective selected by `cfg.mode` and its gradient w.r.t. all logits.
pub fn objective_and_gradient(
    rollout: &GroupRollout,
    adv: &AdvantageSet,
    current: &TwoStagePolicy,
    reference: &ReferencePolicy,
    cfg: &TrainConfig,
) -> Result<(f64, PolicyGradient)> {
    let mut grad = PolicyGradient::zeros(current.shape());
    let value = match cfg.mode {
        Mode::Grpo => grpo_impl(rollout, adv, current, reference, cfg, Some(&mut grad))?,
        Mode::GrpoMa | Mode::NoThink => grpo_ma_impl(rollout, adv, current, reference, cfg, Some(&mut grad))?,
    };
    Ok((value, grad))
}

/// Objective selected by `cfg.mode`, value only.
pub fn objective(
    rollout: &GroupRollout,
    adv: &AdvantageSet,
    current: &TwoStagePolicy,
    reference: &ReferencePolicy,
    cfg: &TrainConfig,
) -> Result<f64> {
    match cfg.mode {
        Mode::Grpo => grpo_objective(rollout, adv, current, reference, cfg),
        Mode::GrpoMa | Mode::NoThink => grpo_ma_objective(rollout, adv, current, reference, cfg),
    }
}

/// Largest disagreement between the analytic gradient and central finite
/// differences of [`objective`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub max_abs_err: f64,
    /// Flat parameter index (thought logits first) of the worst entry.
    pub worst_param: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn gradient_check(
    rollout: &GroupRollout,
    adv: &AdvantageSet,
    current: &TwoStagePolicy,
    reference: &ReferencePolicy,
    cfg: &TrainConfig,
    h: f64,
) -> Result<GradientCheck> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (_, grad) = objective_and_gradient(rollout, adv, current, reference, cfg)?;
    let analytic: Vec<f64> = grad.iter().collect();
    let mut probe = current.clone();
    let mut worst = GradientCheck { max_abs_err: 0.0, worst_param: 0, analytic: analytic[0], numeric: analytic[0] };
    for (idx, &a) in analytic.iter().enumerate() {
        let orig = probe.param(idx);
        probe.set_param(idx, orig + h);
        let plus = objective(rollout, adv, &probe, reference, cfg)?;
        probe.set_param(idx, orig - h);
        let minus = objective(rollout, adv, &probe, reference, cfg)?;
        probe.set_param(idx, orig);
        let numeric = (plus - minus) / (2.0 * h);
        let err = (a - numeric).abs();
        if err > worst.max_abs_err {
            worst = GradientCheck { max_abs_err: err, worst_param: idx, analytic: a, numeric };
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advantage::compute_advantage_set;
    use crate::envs::{TokenTaskEnv, TokenTaskSpec};
    use crate::rng;
    use crate::sampling::{sample_group_policy, GroupConfig};
    use rand::Rng;

    fn spec(thought_len: usize) -> TokenTaskSpec {
        TokenTaskSpec { num_prompts: 2, thought_vocab: 4, answer_vocab: 4, thought_len, answer_len: 2, sparsity: 0.5 }
    }

    fn random_policy(spec: &TokenTaskSpec, scale: f64, seed: u64) -> TwoStagePolicy {
        let mut p = TwoStagePolicy::uniform(spec.shape());
        let mut r = rng::stream(seed);
        for i in 0..p.num_params() {
            p.set_param(i, r.random_range(-scale..scale));
        }
        p
    }

    fn jitter(p: &TwoStagePolicy, scale: f64, seed: u64) -> TwoStagePolicy {
        let mut q = p.clone();
        let mut r = rng::stream(seed);
        for i in 0..q.num_params() {
            q.set_param(i, q.param(i) + r.random_range(-scale..scale));
        }
        q
    }

    struct Case {
        rollout: GroupRollout,
        adv: AdvantageSet,
        current: TwoStagePolicy,
        reference: ReferencePolicy,
        cfg: TrainConfig,
    }

    fn case(group: &str, mode: Mode, thought_len: usize, seed: u64) -> Case {
        let spec = spec(thought_len);
        let env = TokenTaskEnv::generate(spec, seed).unwrap();
        let behavior = random_policy(&spec, 1.0, seed + 1);
        let group: GroupConfig = group.parse().unwrap();
        let rollout = sample_group_policy(&behavior, &env, 1, group, &mut rng::stream(seed + 2)).unwrap();
        let adv = compute_advantage_set(&rollout.rewards).unwrap();
        let mut cfg = TrainConfig::new(group, 1, seed);
        cfg.mode = mode;
        Case {
            rollout,
            adv,
            current: jitter(&behavior, 0.4, seed + 3),
            reference: ReferencePolicy::new(&random_policy(&spec, 1.0, seed + 4)),
            cfg,
        }
    }

    fn single_slot_span(current: &TwoStagePolicy, ratio: f64) -> TokenSpan {
        let slot = Slot::Thought { prompt: 0, pos: 0 };
        TokenSpan::new(vec![(slot, 1)], Some(vec![current.log_prob(slot, 1) - ratio.ln()]))
    }

    #[test]
    fn clip_examples() {
        let p = TwoStagePolicy::uniform(spec(2).shape());
        let reference = ReferencePolicy::new(&p);
        let params = ClipParams { eps_low: 0.2, eps_high: 0.28, beta: 0.0 };
        let j = |r: f64, a: f64| clip_objective(&p, &reference, &single_slot_span(&p, r), a, &params).unwrap();
        assert!((j(2.0, 1.0) - 1.28).abs() < 1e-12);
        assert!((j(0.5, -1.0) + 0.8).abs() < 1e-12);
        assert!((j(1.1, 1.0) - 1.1).abs() < 1e-12);
        assert!((j(0.5, 1.0) - 0.5).abs() < 1e-12);
        assert!((j(2.0, -1.0) + 2.0).abs() < 1e-12);
        assert_eq!(j(1.7, 0.0), 0.0);
    }

    #[test]
    fn span_without_behavior_is_rejected() {
        let p = TwoStagePolicy::uniform(spec(2).shape());
        let reference = ReferencePolicy::new(&p);
        let params = ClipParams { eps_low: 0.2, eps_high: 0.28, beta: 0.0 };
        let span = TokenSpan::thought(0, &[1, 2], None);
        assert!(clip_objective(&p, &reference, &span, 1.0, &params).is_err());
        let empty = TokenSpan::new(vec![], Some(vec![]));
        assert!(clip_objective(&p, &reference, &empty, 1.0, &params).is_err());
        let recorded = span.with_behavior(&p);
        assert!((clip_objective(&p, &reference, &recorded, 1.0, &params).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for seed in [1, 20, 300] {
            for (group, mode, thought_len) in
                [("T4A1", Mode::Grpo, 2), ("T4A4", Mode::GrpoMa, 2), ("T3A2", Mode::GrpoMa, 2), ("T1A8", Mode::NoThink, 0)]
            {
                let c = case(group, mode, thought_len, seed);
                let chk = gradient_check(&c.rollout, &c.adv, &c.current, &c.reference, &c.cfg, 1e-6).unwrap();
                assert!(chk.max_abs_err <= 1e-5, "{group} {mode:?} seed {seed}: {chk:?}");
            }
        }
    }

    #[test]
    fn single_answer_grpo_ma_is_twice_grpo() {
        let c = case("T4A1", Mode::Grpo, 2, 9);
        let mut ma = c.cfg;
        ma.mode = Mode::GrpoMa;
        let g = objective(&c.rollout, &c.adv, &c.current, &c.reference, &c.cfg).unwrap();
        let m = objective(&c.rollout, &c.adv, &c.current, &c.reference, &ma).unwrap();
        assert!((m - 2.0 * g).abs() < 1e-12, "{m} vs {g}");
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let c = case("T4A4", Mode::GrpoMa, 2, 5);
        let mut cfg = c.cfg;
        cfg.mode = Mode::Grpo;
        assert!(grpo_objective(&c.rollout, &c.adv, &c.current, &c.reference, &cfg).is_err());
        assert!(grpo_ma_objective(&c.rollout, &c.adv, &c.current, &c.reference, &cfg).is_err());
    }

    #[test]
    fn zero_advantages_leave_only_the_kl_term() {
        let mut c = case("T4A4", Mode::GrpoMa, 2, 6);
        c.adv.thought_advantages.iter_mut().for_each(|a| *a = 0.0);
        c.adv.answer_advantages = crate::matrix::Matrix::zeros(4, 4);
        c.cfg.beta = 0.0;
        let (v, g) = objective_and_gradient(&c.rollout, &c.adv, &c.current, &c.reference, &c.cfg).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| x == 0.0));
    }

    #[test]
    fn kl_term_pulls_toward_reference() {
        let mut c = case("T4A4", Mode::GrpoMa, 2, 7);
        c.adv.thought_advantages.iter_mut().for_each(|a| *a = 0.0);
        c.adv.answer_advantages = crate::matrix::Matrix::zeros(4, 4);
        c.cfg.beta = 10.0;
        let before = c.current.mean_kl(&c.reference);
        let (_, g) = objective_and_gradient(&c.rollout, &c.adv, &c.current, &c.reference, &c.cfg).unwrap();
        let mut next = c.current.clone();
        next.apply(&g, 0.01);
        assert!(next.mean_kl(&c.reference) < before);
    }
}
