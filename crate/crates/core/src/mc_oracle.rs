//! Brute-force Monte Carlo ground truth for the closed-form predictions,
//! plus covariance-diagonality diagnostics for thought-value estimates.
//!
//! Replications are grouped into fixed blocks of [`BLOCK`] consecutive
//! indices. Replication `r` draws from `child_stream(seed, r)`; blocks may run
//! on any thread but are merged in index order, so results are bit-identical
//! at every parallelism degree.

use rayon::prelude::*;
use serde::Serialize;

use crate::advantage;
use crate::envs::{AnalyticEnv, ThoughtDistribution};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Stream};
use crate::sampling::{sample_group_analytic, GroupConfig, RewardMatrix};
use crate::stats::RunningStats;

pub const BLOCK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OracleConfig {
    pub replications: usize,
    pub k: usize,
    pub m: usize,
    pub seed: u64,
}

impl OracleConfig {
    pub fn new(replications: usize, k: usize, m: usize, seed: u64) -> Result<Self> {
        if replications < 2 {
            return Err(Error::invalid(format!("need N >= 2 replications, got {replications}")));
        }
        GroupConfig::new(k, m)?;
        Ok(OracleConfig { replications, k, m, seed })
    }

    fn group(&self) -> GroupConfig {
        GroupConfig { k: self.k, m: self.m }
    }

    fn check_env(&self, env: &AnalyticEnv) -> Result<()> {
        if env.k() != self.k {
            return Err(Error::invalid(format!("oracle K = {} but env has K = {}", self.k, env.k())));
        }
        Ok(())
    }
}

/// Per-coordinate sample variance over N replications with a batch-means
/// standard error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McVariance {
    pub variances: Vec<f64>,
    pub stderr: Vec<f64>,
    pub means: Vec<f64>,
    pub replications: usize,
}

fn replicate<F>(n: usize, width: usize, seed: u64, fill: F) -> Result<McVariance>
where
    F: Fn(&mut Stream, &mut [f64]) -> Result<()> + Sync,
{
    let blocks = n.div_ceil(BLOCK);
    let per_block: Vec<Vec<RunningStats>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut stats = vec![RunningStats::new(); width];
            let mut buf = vec![0.0; width];
            for r in b * BLOCK..((b + 1) * BLOCK).min(n) {
                let mut rng = rng::child_stream(seed, r as u64);
                fill(&mut rng, &mut buf)?;
                for (s, &x) in stats.iter_mut().zip(&buf) {
                    s.push(x);
                }
            }
            Ok(stats)
        })
        .collect::<Result<_>>()?;

    let mut total = vec![RunningStats::new(); width];
    for block in &per_block {
        for (t, s) in total.iter_mut().zip(block) {
            t.merge(s);
        }
    }
    let full: Vec<&Vec<RunningStats>> = per_block.iter().filter(|b| b[0].count() == BLOCK as u64).collect();
    let stderr = (0..width)
        .map(|c| {
            if full.len() >= 2 {
                let bv: RunningStats = full.iter().map(|b| b[c].variance()).collect();
                (bv.variance() / full.len() as f64).sqrt()
            } else {
                total[c].variance() * (2.0 / (n as f64 - 1.0)).sqrt()
            }
        })
        .collect();
    Ok(McVariance {
        variances: total.iter().map(RunningStats::variance).collect(),
        means: total.iter().map(RunningStats::mean).collect(),
        stderr,
        replications: n,
    })
}

fn identity_indices(k: usize) -> Vec<usize> {
    (0..k).collect()
}

fn thought_advantages_of(rewards: &RewardMatrix) -> Vec<f64> {
    advantage::compute_advantage_set(rewards)
        .map(|s| s.thought_advantages)
        .unwrap_or_else(|_| vec![0.0; rewards.k()])
}

/// Empirical Var[A(th_i)] with the K thoughts held fixed across replications.
pub fn mc_thought_advantage_variance(env: &AnalyticEnv, cfg: &OracleConfig) -> Result<McVariance> {
    cfg.check_env(env)?;
    let idx = identity_indices(cfg.k);
    let group = cfg.group();
    replicate(cfg.replications, cfg.k, cfg.seed, |rng, out| {
        let r = sample_group_analytic(env, group, &idx, rng)?;
        out.copy_from_slice(&thought_advantages_of(&r));
        Ok(())
    })
}

/// Empirical Var[A(ans_{i,j})]; `variances` is the row-major K×M matrix.
pub fn mc_answer_advantage_variance(env: &AnalyticEnv, cfg: &OracleConfig) -> Result<McVariance> {
    cfg.check_env(env)?;
    let idx = identity_indices(cfg.k);
    let group = cfg.group();
    replicate(cfg.replications, cfg.k * cfg.m, cfg.seed, |rng, out| {
        let r = sample_group_analytic(env, group, &idx, rng)?;
        out.copy_from_slice(advantage::answer_advantages(&r)?.as_slice());
        Ok(())
    })
}

/// Setup for the population ("resample thoughts") mode: thought 0 has a
/// pinned true mean while the other K−1 means are redrawn every replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LimitConfig {
    pub distribution: ThoughtDistribution,
    pub pinned_mean: f64,
    /// Gaussian reward stddev shared by all thoughts.
    pub reward_stddev: f64,
    pub k: usize,
    pub m: usize,
    pub replications: usize,
    pub seed: u64,
}

/// Empirical Var[A(th_0)] for the pinned thought under resampled peers.
pub fn mc_limit_variance(cfg: &LimitConfig) -> Result<McVariance> {
    if cfg.k < 3 {
        return Err(Error::invalid("population mode needs K >= 3"));
    }
    if cfg.replications < 2 {
        return Err(Error::invalid("need N >= 2 replications"));
    }
    let group = GroupConfig::new(cfg.k, cfg.m)?;
    let normal = rand_distr::Normal::new(cfg.distribution.mean_of_means, cfg.distribution.stddev_of_means)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let idx = identity_indices(cfg.k);
    replicate(cfg.replications, 1, cfg.seed, |rng, out| {
        use rand_distr::Distribution;
        let mut means = Vec::with_capacity(cfg.k);
        means.push(cfg.pinned_mean);
        means.extend((1..cfg.k).map(|_| normal.sample(rng)));
        let env = AnalyticEnv::gaussian_uniform(means, cfg.reward_stddev)?;
        let r = sample_group_analytic(&env, group, &idx, rng)?;
        out[0] = thought_advantages_of(&r)[0];
        Ok(())
    })
}

/// N replicated thought-value vectors V = (V_1..V_K) from a fixed env.
pub fn sample_thought_value_vectors(env: &AnalyticEnv, m: usize, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let group = GroupConfig::new(env.k(), m)?;
    let idx = identity_indices(env.k());
    (0..n)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::child_stream(seed, r as u64);
            let rewards = sample_group_analytic(env, group, &idx, &mut rng)?;
            Ok(advantage::thought_values(&rewards))
        })
        .collect()
}

fn standardized_entry(values: &[f64], i: usize) -> Result<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(Error::DegeneratePopulation("perturbation reached zero spread".into()));
    }
    Ok((values[i] - mean) / sd)
}

/// Central-difference gradient of `V ↦ (V_i − V̄)/S_V`.
pub fn numerical_gradient(values: &[f64], i: usize, h: f64) -> Result<Vec<f64>> {
    if values.len() < 2 || i >= values.len() {
        return Err(Error::invalid("need K >= 2 values and a valid index"));
    }
    if !(h > 0.0) {
        return Err(Error::invalid("step must be positive"));
    }
    if values.iter().all(|&x| x == values[0]) {
        return Err(Error::DegeneratePopulation("all values are equal".into()));
    }
    let mut v = values.to_vec();
    (0..values.len())
        .map(|kk| {
            let orig = v[kk];
            v[kk] = orig + h;
            let plus = standardized_entry(&v, i);
            v[kk] = orig - h;
            let minus = standardized_entry(&v, i);
            v[kk] = orig;
            Ok((plus? - minus?) / (2.0 * h))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub covariance: Matrix,
    /// Fraction of rows with |Σ_ii| > Σ_{j≠i} |Σ_ij|.
    pub row_dominance: f64,
    /// Σ_i Σ_ii² / Σ_ij Σ_ij².
    pub frobenius_ratio: f64,
}

/// Empirical covariance of N sample vectors (N−1 denominator) and its
/// diagonality measures.
pub fn covariance_diagnostics(samples: &[Vec<f64>]) -> Result<DiagnosticsReport> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::invalid(format!("need N >= 2 samples, got {n}")));
    }
    let k = samples[0].len();
    if k == 0 || samples.iter().any(|s| s.len() != k) {
        return Err(Error::invalid("samples must be non-empty vectors of equal length"));
    }
    let means: Vec<f64> = (0..k).map(|c| samples.iter().map(|s| s[c]).sum::<f64>() / n as f64).collect();
    let mut cov = Matrix::zeros(k, k);
    for s in samples {
        for a in 0..k {
            let da = s[a] - means[a];
            for b in a..k {
                let v = cov.get(a, b) + da * (s[b] - means[b]);
                cov.set(a, b, v);
            }
        }
    }
    for a in 0..k {
        for b in a..k {
            let v = cov.get(a, b) / (n - 1) as f64;
            cov.set(a, b, v);
            cov.set(b, a, v);
        }
    }
    diagnostics_from_covariance(cov)
}

/// Diagonality measures of a given symmetric matrix.
pub fn diagnostics_from_covariance(cov: Matrix) -> Result<DiagnosticsReport> {
    let k = cov.rows();
    if k == 0 || cov.cols() != k {
        return Err(Error::invalid("covariance must be a non-empty square matrix"));
    }
    for a in 0..k {
        for b in 0..a {
            if cov.get(a, b) != cov.get(b, a) {
                return Err(Error::invalid("covariance must be symmetric"));
            }
        }
    }
    let dominant = (0..k)
        .filter(|&i| {
            let off: f64 = (0..k).filter(|&j| j != i).map(|j| cov.get(i, j).abs()).sum();
            cov.get(i, i).abs() > off
        })
        .count();
    let diag: f64 = (0..k).map(|i| cov.get(i, i).powi(2)).sum();
    let total: f64 = cov.as_slice().iter().map(|x| x * x).sum();
    let frobenius_ratio = if total > 0.0 { diag / total } else { 1.0 };
    Ok(DiagnosticsReport { row_dominance: dominant as f64 / k as f64, frobenius_ratio, covariance: cov })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variance_theory::{advantage_gradient, PopulationMoments, predicted_thought_variance};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn zero_noise_gives_zero_variance() {
        let env = AnalyticEnv::gaussian_uniform(vec![0.0, 0.4, 1.0], 0.0).unwrap();
        let cfg = OracleConfig::new(500, 3, 2, 1).unwrap();
        assert!(mc_thought_advantage_variance(&env, &cfg).unwrap().variances.iter().all(|&v| v == 0.0));
        assert!(mc_answer_advantage_variance(&env, &cfg).unwrap().variances.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_env_is_allowed() {
        let env = AnalyticEnv::gaussian_uniform(vec![0.5; 4], 0.0).unwrap();
        let cfg = OracleConfig::new(100, 4, 3, 1).unwrap();
        assert_eq!(mc_thought_advantage_variance(&env, &cfg).unwrap().variances, vec![0.0; 4]);
    }

    #[test]
    fn config_checks() {
        assert!(OracleConfig::new(1, 3, 2, 0).is_err());
        let env = AnalyticEnv::gaussian_uniform(vec![0.0, 1.0], 0.1).unwrap();
        let cfg = OracleConfig::new(10, 3, 2, 0).unwrap();
        assert!(mc_thought_advantage_variance(&env, &cfg).is_err());
    }

    #[test]
    fn result_independent_of_thread_count() {
        let env = AnalyticEnv::gaussian_uniform(vec![0.0, 0.3, 0.7, 1.0], 0.2).unwrap();
        let cfg = OracleConfig::new(5 * BLOCK + 17, 4, 3, 99).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| mc_thought_advantage_variance(&env, &cfg).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn small_run_tracks_prediction() {
        let env = AnalyticEnv::gaussian_uniform(vec![0.0, 0.25, 0.5, 0.75, 1.0], 0.1).unwrap();
        let cfg = OracleConfig::new(20_000, 5, 8, 5).unwrap();
        let mc = mc_thought_advantage_variance(&env, &cfg).unwrap();
        let p = PopulationMoments::from_env(&env).unwrap();
        for i in 0..5 {
            let pred = predicted_thought_variance(&p, 8, i).unwrap();
            assert!((mc.variances[i] - pred).abs() / pred < 0.1, "i={i} mc={} pred={pred}", mc.variances[i]);
        }
    }

    #[test]
    fn numerical_gradient_examples() {
        let g = numerical_gradient(&[0.0, 1.0, 2.0], 2, 1e-5).unwrap();
        let exact = advantage_gradient(&[0.0, 1.0, 2.0], 2).unwrap();
        for (a, b) in g.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(g.iter().sum::<f64>().abs() < 1e-8);
        assert!(numerical_gradient(&[1.0, 1.0, 1.0], 0, 1e-5).is_err());
    }

    #[test]
    fn numerical_gradient_is_second_order() {
        let v = [0.3, -1.2, 0.8, 2.0];
        let exact = advantage_gradient(&v, 1).unwrap();
        let err = |h: f64| {
            numerical_gradient(&v, 1, h)
                .unwrap()
                .iter()
                .zip(&exact)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((3.0..5.0).contains(&ratio), "error ratio {ratio}");
    }

    #[test]
    fn diagnostics_on_constructed_matrices() {
        let d = diagnostics_from_covariance(Matrix::from_rows(&[[2.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 1.0]]).unwrap())
            .unwrap();
        assert_eq!((d.row_dominance, d.frobenius_ratio), (1.0, 1.0));
        let d = diagnostics_from_covariance(Matrix::from_rows(&[[1.0, 0.5], [0.5, 1.0]]).unwrap()).unwrap();
        assert_eq!((d.row_dominance, d.frobenius_ratio), (1.0, 0.8));
        let d = diagnostics_from_covariance(Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!((d.row_dominance, d.frobenius_ratio), (0.0, 0.5));
        assert!(diagnostics_from_covariance(Matrix::from_rows(&[[1.0, 0.2], [0.1, 1.0]]).unwrap()).is_err());
        assert!(covariance_diagnostics(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn empirical_covariance_is_symmetric_psd_and_diagonal_for_iid() {
        let mut rng = rng::stream(12);
        let samples: Vec<Vec<f64>> = (0..10_000)
            .map(|_| (0..8).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let d = covariance_diagnostics(&samples).unwrap();
        assert!(d.frobenius_ratio >= 0.9);
        let c = &d.covariance;
        // x^T C x >= 0 for a few probe vectors.
        for probe in 0..8 {
            let x: Vec<f64> = (0..8).map(|j| if j <= probe { 1.0 } else { -0.5 }).collect();
            let q: f64 = (0..8).flat_map(|a| (0..8).map(move |b| (a, b))).map(|(a, b)| x[a] * c.get(a, b) * x[b]).sum();
            assert!(q >= -1e-10);
        }
    }

    #[test]
    fn thought_value_vectors_are_reproducible() {
        let env = AnalyticEnv::gaussian_uniform(vec![0.0, 0.5, 1.0], 0.3).unwrap();
        let a = sample_thought_value_vectors(&env, 4, 50, 3).unwrap();
        assert_eq!(a, sample_thought_value_vectors(&env, 4, 50, 3).unwrap());
        assert_eq!(a.len(), 50);
    }
}
