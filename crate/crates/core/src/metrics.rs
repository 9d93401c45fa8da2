//! Training-stability and reward-signal metrics.

use serde::Serialize;

use crate::advantage::AdvantageSet;
use crate::error::{Error, Result};
use crate::sampling::{GroupConfig, RewardMatrix};
use crate::trainer::Mode;

/// One training step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean accuracy reward over every sampled response of the step.
    pub mean_reward: f64,
    /// L2 norm of the full parameter gradient.
    pub grad_norm: f64,
    pub objective: f64,
    pub thought_adv_abs_mean: f64,
    pub answer_adv_abs_mean: f64,
    /// Mean over prompts of the per-group inconsistency rate.
    pub inconsistency_rate: f64,
    /// Total reward of each prompt's group, in prompt order.
    pub group_totals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRunLog {
    pub group: GroupConfig,
    pub mode: Mode,
    pub seed: u64,
    /// Mean exact KL of the final policy from the reference.
    pub final_kl: f64,
    pub records: Vec<StepRecord>,
}

impl TrainRunLog {
    pub fn rewards(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_reward).collect()
    }

    pub fn grad_norms(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.grad_norm).collect()
    }

    /// Last entry of the window-smoothed reward curve.
    pub fn final_smoothed_reward(&self, window: usize) -> Result<f64> {
        moving_average(&self.rewards(), window)?
            .last()
            .copied()
            .ok_or_else(|| Error::invalid("empty training log"))
    }

    /// NoZeroRate over every group sampled during the run.
    pub fn no_zero_rate(&self) -> Result<f64> {
        no_zero_rate_from_totals(self.records.iter().flat_map(|r| r.group_totals.iter().copied()))
    }

    pub fn gss_at(&self, threshold: f64) -> Result<usize> {
        gss_at(&self.grad_norms(), threshold)
    }

    pub fn mean_inconsistency(&self) -> f64 {
        self.records.iter().map(|r| r.inconsistency_rate).sum::<f64>() / self.records.len().max(1) as f64
    }
}

/// `GSS(g_i) = |g_i| / mean_j |g_j|` over the whole trajectory.
pub fn gss_series(grad_norms: &[f64]) -> Result<Vec<f64>> {
    let mean = grad_norms.iter().map(|g| g.abs()).sum::<f64>() / grad_norms.len() as f64;
    if grad_norms.is_empty() || !(mean > 0.0) {
        return Err(Error::invalid("gradient spike score needs at least one nonzero gradient norm"));
    }
    Ok(grad_norms.iter().map(|g| g.abs() / mean).collect())
}

/// Causal variant: each entry is normalized by the mean of the norms seen
/// so far (including itself).
pub fn gss_series_causal(grad_norms: &[f64]) -> Result<Vec<f64>> {
    if !grad_norms.iter().any(|g| *g != 0.0) {
        return Err(Error::invalid("gradient spike score needs at least one nonzero gradient norm"));
    }
    let mut sum = 0.0;
    Ok(grad_norms
        .iter()
        .enumerate()
        .map(|(t, g)| {
            sum += g.abs();
            let mean = sum / (t + 1) as f64;
            if mean > 0.0 {
                g.abs() / mean
            } else {
                0.0
            }
        })
        .collect())
}

/// Number of steps with GSS strictly above `threshold` (GSS@10 for 10).
pub fn gss_at(grad_norms: &[f64], threshold: f64) -> Result<usize> {
    Ok(gss_series(grad_norms)?.into_iter().filter(|&s| s > threshold).count())
}

/// Fraction of (thought, answer) pairs whose advantages have strictly
/// opposite signs.
pub fn inconsistency_rate(adv: &AdvantageSet) -> f64 {
    let a = &adv.answer_advantages;
    let total = a.rows() * a.cols();
    if total == 0 {
        return 0.0;
    }
    let bad = (0..a.rows())
        .map(|i| {
            let t = adv.thought_advantages[i];
            a.row(i).iter().filter(|&&x| t * x < 0.0).count()
        })
        .sum::<usize>();
    bad as f64 / total as f64
}

/// Fraction of groups whose total reward is positive.
pub fn no_zero_rate(groups: &[RewardMatrix]) -> Result<f64> {
    no_zero_rate_from_totals(groups.iter().map(RewardMatrix::total))
}

pub fn no_zero_rate_from_totals(totals: impl IntoIterator<Item = f64>) -> Result<f64> {
    let (n, pos) = totals.into_iter().fold((0usize, 0usize), |(n, p), t| (n + 1, p + usize::from(t > 0.0)));
    if n == 0 {
        return Err(Error::invalid("NoZeroRate needs at least one step"));
    }
    Ok(pos as f64 / n as f64)
}

/// Trailing moving average; the first entries average the available prefix.
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::invalid("moving-average window must be >= 1"));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for t in 0..series.len() {
        sum += series[t];
        if t >= window {
            sum -= series[t - window];
        }
        // Re-sum occasionally so long runs do not accumulate drift.
        if t % 4096 == 4095 {
            sum = series[(t + 1).saturating_sub(window)..=t].iter().sum();
        }
        out.push(sum / (t + 1).min(window) as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use proptest::prelude::*;

    #[test]
    fn gss_examples() {
        assert_eq!(gss_series(&[2.5; 6]).unwrap(), vec![1.0; 6]);
        let mut spiky = vec![1.0; 99];
        spiky.push(200.0);
        let s = gss_series(&spiky).unwrap();
        assert!((s[99] - 200.0 / 2.99).abs() < 1e-12);
        assert!((s[99] - 66.88963).abs() < 1e-5);
        let scaled: Vec<f64> = spiky.iter().map(|g| g * 7.0).collect();
        for (a, b) in s.iter().zip(gss_series(&scaled).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(gss_series(&[0.0, 0.0]).is_err());
        assert!(gss_series(&[]).is_err());
    }

    #[test]
    fn gss_at_examples() {
        assert_eq!(gss_at(&[3.0; 10], 10.0).unwrap(), 0);
        let mut spiky = vec![1.0; 99];
        spiky.push(200.0);
        assert_eq!(gss_at(&spiky, 10.0).unwrap(), 1);
        assert_eq!(gss_at(&spiky, 0.0).unwrap(), 100);
    }

    #[test]
    fn causal_gss_uses_running_mean() {
        let s = gss_series_causal(&[0.0, 2.0, 2.0, 8.0]).unwrap();
        for (a, b) in s.iter().zip([0.0, 2.0, 1.5, 8.0 / 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn adv(thought: Vec<f64>, answers: &[[f64; 2]]) -> AdvantageSet {
        AdvantageSet {
            thought_values: vec![0.0; thought.len()],
            thought_advantages: thought,
            answer_advantages: Matrix::from_rows(answers).unwrap(),
            degenerate_thought: false,
            degenerate_answer: false,
        }
    }

    #[test]
    fn inconsistency_examples() {
        assert_eq!(inconsistency_rate(&adv(vec![1.0, -1.0], &[[1.0, -1.0], [-1.0, 1.0]])), 0.5);
        assert_eq!(inconsistency_rate(&adv(vec![1.0, -1.0], &[[0.5, 2.0], [-1.0, -0.1]])), 0.0);
        assert_eq!(inconsistency_rate(&adv(vec![0.0, 0.0], &[[0.0, 0.0], [0.0, 0.0]])), 0.0);
        assert_eq!(inconsistency_rate(&adv(vec![0.0, 1.0], &[[-1.0, 1.0], [0.0, 1.0]])), 0.0);
    }

    #[test]
    fn no_zero_rate_examples() {
        let zero = RewardMatrix::from_rows(&[[0.0, 0.0], [0.0, 0.0]]).unwrap();
        let one = RewardMatrix::from_rows(&[[0.0, 1.0], [0.0, 0.0]]).unwrap();
        assert_eq!(no_zero_rate(&[zero.clone(), one.clone()]).unwrap(), 0.5);
        assert_eq!(no_zero_rate(&[one.clone(), one]).unwrap(), 1.0);
        assert_eq!(no_zero_rate(&[zero.clone(), zero]).unwrap(), 0.0);
        assert!(no_zero_rate(&[]).is_err());
    }

    #[test]
    fn moving_average_examples() {
        let s = [0.3, 1.7, -2.0, 4.0];
        assert_eq!(moving_average(&s, 1).unwrap(), s.to_vec());
        assert_eq!(moving_average(&[0.0, 1.0, 1.0], 2).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(moving_average(&[0.25; 7], 3).unwrap(), vec![0.25; 7]);
        assert!(moving_average(&s, 0).is_err());
    }

    proptest! {
        #[test]
        fn gss_mean_is_one(g in prop::collection::vec(0.0f64..100.0, 1..300)) {
            prop_assume!(g.iter().any(|x| *x > 0.0));
            let s = gss_series(&g).unwrap();
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-12);
        }

        #[test]
        fn moving_average_preserves_monotonicity(mut xs in prop::collection::vec(-10.0f64..10.0, 1..9000), w in 1usize..300) {
            xs.sort_by(f64::total_cmp);
            let ma = moving_average(&xs, w).unwrap();
            prop_assert!(ma.windows(2).all(|p| p[1] >= p[0] - 1e-12));
        }

        #[test]
        fn rates_lie_in_unit_interval(totals in prop::collection::vec(-1.0f64..1.0, 1..50)) {
            let r = no_zero_rate_from_totals(totals).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }
}
