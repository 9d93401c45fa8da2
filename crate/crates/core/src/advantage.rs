//! Group-relative advantages.
//!
//! GRPO standardizes one reward per response against its group. GRPO-MA
//! standardizes at two levels: thought values (row means of the K×M reward
//! matrix) against each other, and every answer reward against all K·M
//! rewards. All standard deviations use the n−1 denominator. A group whose
//! inputs are all equal gets exactly zero advantages.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sampling::RewardMatrix;

/// Thought- and answer-level advantages of one group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdvantageSet {
    pub thought_values: Vec<f64>,
    pub thought_advantages: Vec<f64>,
    pub answer_advantages: Matrix,
    /// All thought values equal (or K = 1): thought advantages are zero.
    pub degenerate_thought: bool,
    /// All rewards equal: answer advantages are zero.
    pub degenerate_answer: bool,
}

/// Returns the standardized values and whether the input was degenerate.
fn standardize(xs: &[f64]) -> (Vec<f64>, bool) {
    let n = xs.len();
    if xs.iter().all(|&x| x == xs[0]) {
        return (vec![0.0; n], true);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    let std = (ss / (n - 1) as f64).sqrt();
    if std == 0.0 {
        return (vec![0.0; n], true);
    }
    (xs.iter().map(|x| (x - mean) / std).collect(), false)
}

/// `A(o_i) = (R_i − mean) / std` over a group of K single-response rewards.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::invalid(format!("need K >= 2 rewards, got {}", rewards.len())));
    }
    Ok(standardize(rewards).0)
}

/// Row means V(th_i). Each row is summed in sorted order so the value does
/// not depend on the order answers were sampled in.
pub fn thought_values(rewards: &RewardMatrix) -> Vec<f64> {
    let m = rewards.m() as f64;
    let mut buf = Vec::with_capacity(rewards.m());
    (0..rewards.k())
        .map(|i| {
            buf.clear();
            buf.extend_from_slice(rewards.row(i));
            buf.sort_by(f64::total_cmp);
            buf.iter().sum::<f64>() / m
        })
        .collect()
}

pub fn thought_advantages(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::invalid(format!("need K >= 2 thought values, got {}", values.len())));
    }
    Ok(standardize(values).0)
}

/// Every R_{i,j} standardized against the mean and (KM−1) std of all K·M rewards.
pub fn answer_advantages(rewards: &RewardMatrix) -> Result<Matrix> {
    Ok(answer_level(rewards)?.0)
}

fn answer_level(rewards: &RewardMatrix) -> Result<(Matrix, bool)> {
    if rewards.values().len() < 2 {
        return Err(Error::invalid("answer advantages need K*M >= 2 rewards"));
    }
    let (adv, degenerate) = standardize(rewards.values());
    Ok((Matrix::from_vec(rewards.k(), rewards.m(), adv)?, degenerate))
}

/// Both advantage levels plus degeneracy flags.
///
/// A single thought (K = 1, the no-think layout) has no relative thought
/// advantage; it is reported as degenerate with a zero advantage.
pub fn compute_advantage_set(rewards: &RewardMatrix) -> Result<AdvantageSet> {
    let (answer_advantages, degenerate_answer) = answer_level(rewards)?;
    let values = thought_values(rewards);
    let (thought_advantages, degenerate_thought) = if values.len() < 2 {
        (vec![0.0; values.len()], true)
    } else {
        standardize(&values)
    };
    Ok(AdvantageSet {
        thought_values: values,
        thought_advantages,
        answer_advantages,
        degenerate_thought,
        degenerate_answer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const R2: f64 = std::f64::consts::FRAC_1_SQRT_2;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn grpo_examples() {
        assert_eq!(grpo_advantages(&[1.0, 0.0, 0.0, 0.0]).unwrap(), vec![1.5, -0.5, -0.5, -0.5]);
        assert_eq!(grpo_advantages(&[0.3; 3]).unwrap(), vec![0.0; 3]);
        assert!(close(&grpo_advantages(&[2.0, 4.0]).unwrap(), &[-R2, R2], 1e-12));
        assert!(grpo_advantages(&[1.0]).is_err());
    }

    #[test]
    fn thought_value_examples() {
        let r = RewardMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert_eq!(thought_values(&r), vec![0.5, 0.0]);
        let r = RewardMatrix::from_rows(&[[0.2, 0.4, 0.6]]).unwrap();
        assert!((thought_values(&r)[0] - 0.4).abs() < 1e-15);
        let r = RewardMatrix::from_rows(&[[0.7], [0.1], [0.4]]).unwrap();
        assert_eq!(thought_values(&r), vec![0.7, 0.1, 0.4]);
    }

    #[test]
    fn thought_advantage_examples() {
        assert!(close(&thought_advantages(&[0.5, 0.0]).unwrap(), &[R2, -R2], 1e-12));
        assert_eq!(thought_advantages(&[2.0, 2.0, 2.0]).unwrap(), vec![0.0; 3]);
        let v = [0.1, 0.5, 0.2, 0.9];
        let shifted: Vec<f64> = v.iter().map(|x| x + 3.0).collect();
        assert!(close(&thought_advantages(&v).unwrap(), &thought_advantages(&shifted).unwrap(), 1e-12));
        assert!(thought_advantages(&[1.0]).is_err());
    }

    #[test]
    fn answer_advantage_examples() {
        let r = RewardMatrix::from_rows(&[[1.0, 1.0], [0.0, 0.0]]).unwrap();
        let a = answer_advantages(&r).unwrap();
        let h = 0.75f64.sqrt();
        assert!(close(a.as_slice(), &[h, h, -h, -h], 1e-12));
        let c = RewardMatrix::from_rows(&[[0.4, 0.4], [0.4, 0.4]]).unwrap();
        assert_eq!(answer_advantages(&c).unwrap().as_slice(), &[0.0; 4]);
        let scaled = RewardMatrix::from_rows(&[[7.0, 7.0], [0.0, 0.0]]).unwrap();
        assert!(close(answer_advantages(&scaled).unwrap().as_slice(), a.as_slice(), 1e-12));
        assert!(answer_advantages(&RewardMatrix::from_rows(&[[1.0]]).unwrap()).is_err());
    }

    #[test]
    fn advantage_set_examples() {
        let r = RewardMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let s = compute_advantage_set(&r).unwrap();
        assert!(close(&s.thought_advantages, &[R2, -R2], 1e-12));
        assert!(close(s.answer_advantages.as_slice(), &[1.5, -0.5, -0.5, -0.5], 1e-12));
        assert!(!s.degenerate_thought && !s.degenerate_answer);

        let z = RewardMatrix::from_rows(&[[0.0, 0.0], [0.0, 0.0]]).unwrap();
        let s = compute_advantage_set(&z).unwrap();
        assert!(s.degenerate_thought && s.degenerate_answer);
        assert_eq!(s.thought_advantages, vec![0.0; 2]);
        assert_eq!(s.answer_advantages.as_slice(), &[0.0; 4]);
    }

    #[test]
    fn single_thought_group() {
        let r = RewardMatrix::from_rows(&[[1.0, 0.0, 0.0, 0.0]]).unwrap();
        let s = compute_advantage_set(&r).unwrap();
        assert!(s.degenerate_thought);
        assert_eq!(s.thought_advantages, vec![0.0]);
        assert_eq!(s.answer_advantages.as_slice(), &[1.5, -0.5, -0.5, -0.5]);
    }

    #[test]
    fn row_permutation_does_not_break_degeneracy() {
        let r = RewardMatrix::from_rows(&[[0.1, 0.2, 0.7], [0.7, 0.1, 0.2], [0.2, 0.7, 0.1]]).unwrap();
        let s = compute_advantage_set(&r).unwrap();
        assert!(s.degenerate_thought);
        assert!(!s.degenerate_answer);
    }

    fn matrix_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (2usize..=8, 1usize..=5).prop_flat_map(|(k, m)| {
            (Just(k), Just(m), prop::collection::vec(-5.0f64..5.0, k * m))
        })
    }

    proptest! {
        #[test]
        fn grpo_equivalence_at_m1(col in prop::collection::vec(-3.0f64..3.0, 2..12)) {
            let rows: Vec<[f64; 1]> = col.iter().map(|&x| [x]).collect();
            let s = compute_advantage_set(&RewardMatrix::from_rows(&rows).unwrap()).unwrap();
            let g = grpo_advantages(&col).unwrap();
            prop_assert!(close(&s.thought_advantages, &g, 1e-12));
            prop_assert!(close(s.answer_advantages.as_slice(), &g, 1e-12));
        }

        #[test]
        fn affine_invariance((k, m, vals) in matrix_strategy(), a in 0.1f64..10.0, b in -10.0f64..10.0) {
            let r = RewardMatrix::new(Matrix::from_vec(k, m, vals.clone()).unwrap()).unwrap();
            let t = RewardMatrix::new(Matrix::from_vec(k, m, vals.iter().map(|x| a * x + b).collect()).unwrap()).unwrap();
            let s = compute_advantage_set(&r).unwrap();
            let u = compute_advantage_set(&t).unwrap();
            prop_assert!(close(&s.thought_advantages, &u.thought_advantages, 1e-9));
            prop_assert!(close(s.answer_advantages.as_slice(), u.answer_advantages.as_slice(), 1e-9));
        }

        #[test]
        fn row_permutation_invariance((k, m, vals) in matrix_strategy(), rot in 0usize..5) {
            let r = RewardMatrix::new(Matrix::from_vec(k, m, vals.clone()).unwrap()).unwrap();
            let mut rows = r.matrix().to_rows();
            for row in &mut rows {
                row.rotate_left(rot % m);
            }
            let p = RewardMatrix::from_rows(&rows).unwrap();
            prop_assert_eq!(
                compute_advantage_set(&r).unwrap().thought_advantages,
                compute_advantage_set(&p).unwrap().thought_advantages
            );
        }
    }
}
