//! `grad-check`: closed-form gradients against central finite differences.

use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::advantage::compute_advantage_set;
use crate::envs::{TaskShape, TokenTaskEnv, TokenTaskSpec};
use crate::error::{Error, Result};
use crate::mc_oracle::numerical_gradient;
use crate::rng::{self, derive_seed};
use crate::sampling::{sample_group_policy, GroupConfig};
use crate::trainer::objective::gradient_check;
use crate::trainer::{Mode, ReferencePolicy, TrainConfig, TwoStagePolicy};
use crate::variance_theory::advantage_gradient;

use super::config::{ExperimentConfig, GradCheckConfig};
use super::provenance;
use super::report::{write_csv, write_summary};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub check: &'static str,
    pub case: String,
    pub max_abs_err: f64,
    pub tolerance: f64,
    /// Parameter (or V component) with the largest error.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckSummary {
    pub advantage_max_abs_err: f64,
    pub advantage_tolerance: f64,
    pub objective_max_abs_err: f64,
    pub objective_tolerance: f64,
    pub passed: bool,
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckSummary {
    pub fn digest(&self) -> String {
        format!(
            "advantage gradient max error {:.3e} (tolerance {:.0e}); objective gradient max error {:.3e} (tolerance {:.0e})",
            self.advantage_max_abs_err, self.advantage_tolerance, self.objective_max_abs_err, self.objective_tolerance
        )
    }
}

/// Human-readable name of a flat policy parameter index.
pub fn param_name(s: &TaskShape, idx: usize) -> String {
    let t = s.num_prompts * s.thought_len * s.thought_vocab;
    if idx < t {
        let v = idx % s.thought_vocab;
        let pos = (idx / s.thought_vocab) % s.thought_len;
        let p = idx / (s.thought_vocab * s.thought_len);
        format!("thought[prompt={p},pos={pos},token={v}]")
    } else {
        let a = idx - t;
        let v = a % s.answer_vocab;
        let pos = (a / s.answer_vocab) % s.answer_len;
        let ctx = (a / (s.answer_vocab * s.answer_len)) % s.thought_contexts();
        let p = a / (s.answer_vocab * s.answer_len * s.thought_contexts());
        format!("answer[prompt={p},context={ctx},pos={pos},token={v}]")
    }
}

fn advantage_rows(g: &GradCheckConfig, seed: u64) -> Result<GradCheckRow> {
    if g.k_min < 3 || g.k_max < g.k_min {
        return Err(Error::Config("[grad_check] needs 3 <= k_min <= k_max".into()));
    }
    let mut r = rng::stream(seed);
    let mut worst = GradCheckRow {
        check: "advantage",
        case: format!("{} random V, K in [{}, {}]", g.trials, g.k_min, g.k_max),
        max_abs_err: 0.0,
        tolerance: g.adv_tolerance,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        passed: true,
    };
    for trial in 0..g.trials {
        let k = r.random_range(g.k_min..=g.k_max);
        let v: Vec<f64> = (0..k).map(|_| r.random_range(-1.0..1.0)).collect();
        for i in 0..k {
            let exact = advantage_gradient(&v, i)?;
            let fd = numerical_gradient(&v, i, g.adv_step)?;
            for (kk, (a, b)) in exact.iter().zip(&fd).enumerate() {
                let err = (a - b).abs();
                if err > worst.max_abs_err || worst.worst.is_empty() {
                    worst.max_abs_err = err;
                    worst.worst = format!("trial={trial},K={k},d A_{i} / d V_{kk}");
                    worst.analytic = *a;
                    worst.numeric = *b;
                }
            }
        }
    }
    worst.passed = worst.max_abs_err <= g.adv_tolerance;
    Ok(worst)
}

fn random_policy(shape: TaskShape, scale: f64, r: &mut rng::Stream) -> TwoStagePolicy {
    let mut p = TwoStagePolicy::uniform(shape);
    for i in 0..p.num_params() {
        p.set_param(i, r.random_range(-scale..scale));
    }
    p
}

fn objective_row(g: &GradCheckConfig, group: &str, mode: Mode, thought_len: usize, seed: u64) -> Result<GradCheckRow> {
    let spec = TokenTaskSpec {
        num_prompts: g.prompts,
        thought_vocab: g.vocab,
        answer_vocab: g.vocab,
        thought_len,
        answer_len: g.length,
        sparsity: 0.5,
    };
    let env = TokenTaskEnv::generate(spec, derive_seed(seed, 0)).map_err(|e| Error::Config(format!("[grad_check]: {e}")))?;
    let mut r = rng::child_stream(seed, 1);
    let behavior = random_policy(spec.shape(), 1.0, &mut r);
    // Moving the current policy away from the behavior policy puts some
    // ratios outside the clip range.
    let mut current = behavior.clone();
    for i in 0..current.num_params() {
        current.set_param(i, current.param(i) + r.random_range(-0.4..0.4));
    }
    let reference = ReferencePolicy::new(&random_policy(spec.shape(), 1.0, &mut r));
    let group: GroupConfig = group.parse()?;
    let mut cfg = TrainConfig::new(group, 1, seed);
    cfg.mode = mode;

    let mut row = GradCheckRow {
        check: "objective",
        case: format!("{group} {}", serde_json::to_value(mode)?.as_str().unwrap_or_default()),
        max_abs_err: 0.0,
        tolerance: g.objective_tolerance,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        passed: true,
    };
    for prompt in 0..g.prompts {
        let rollout = sample_group_policy(&behavior, &env, prompt, group, &mut rng::child_stream(seed, 2 + prompt as u64))?;
        let adv = compute_advantage_set(&rollout.rewards)?;
        let chk = gradient_check(&rollout, &adv, &current, &reference, &cfg, g.objective_step)?;
        if chk.max_abs_err > row.max_abs_err || row.worst.is_empty() {
            row.max_abs_err = chk.max_abs_err;
            row.worst = format!("prompt {prompt} rollout: {}", param_name(&spec.shape(), chk.worst_param));
            row.analytic = chk.analytic;
            row.numeric = chk.numeric;
        }
    }
    row.passed = row.max_abs_err <= g.objective_tolerance;
    Ok(row)
}

pub fn cmd_grad_check(cfg: &ExperimentConfig, out: &Path) -> Result<GradCheckSummary> {
    let mut g = cfg.grad_check.clone().unwrap_or_default();
    if let Some(t) = cfg.tolerance {
        g.adv_tolerance = t;
        g.objective_tolerance = t;
    }
    if g.prompts == 0 || g.vocab < 2 || g.length == 0 || g.trials == 0 {
        return Err(Error::Config("[grad_check] needs prompts >= 1, vocab >= 2, length >= 1, trials >= 1".into()));
    }
    let mut rows = vec![advantage_rows(&g, derive_seed(cfg.seed, 1))?];
    let cases = [
        ("T4A1", Mode::Grpo, g.length),
        ("T4A4", Mode::GrpoMa, g.length),
        ("T3A2", Mode::GrpoMa, g.length),
        ("T1A8", Mode::NoThink, 0),
    ];
    for (n, (group, mode, thought_len)) in cases.into_iter().enumerate() {
        rows.push(objective_row(&g, group, mode, thought_len, derive_seed(cfg.seed, 100 + n as u64))?);
    }
    let objective_max = rows.iter().filter(|r| r.check == "objective").map(|r| r.max_abs_err).fold(0.0, f64::max);
    let summary = GradCheckSummary {
        advantage_max_abs_err: rows[0].max_abs_err,
        advantage_tolerance: g.adv_tolerance,
        objective_max_abs_err: objective_max,
        objective_tolerance: g.objective_tolerance,
        passed: rows.iter().all(|r| r.passed),
        rows,
    };
    let prov = provenance(cfg);
    write_csv(out, &prov, &summary.rows)?;
    write_summary(out, &prov, "grad-check", &summary)?;
    Ok(summary)
}
