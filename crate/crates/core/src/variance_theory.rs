//! First-order (delta-method) variance predictions for standardized advantages.
//!
//! With thought values V_k = mean of M i.i.d. rewards with mean μ_k and
//! variance σ²_k, the thought advantage f_i(V) = (V_i − V̄)/S_V is linearized
//! at V = μ:
//!
//! ```text
//! ∂f_i/∂V_k |_μ = (δ_ik − 1/K − μ̃_i μ̃_k/(K−1)) / σ_μ
//! Var[A(th_i)] ≈ Σ_k (∂f_i/∂V_k)² σ²_k / M
//! ```
//!
//! where σ²_μ is the (K−1) sample variance of the true means and μ̃ the
//! standardized true means. As K grows with the μ_k drawn from a population
//! of variance σ²_π the prediction tends to σ²_i / (M σ²_π).

use serde::Serialize;

use crate::envs::AnalyticEnv;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// True per-thought moments and the derived population summaries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationMoments {
    mus: Vec<f64>,
    sigmas_sq: Vec<f64>,
    mean: f64,
    spread_sq: f64,
    normalized: Vec<f64>,
}

impl PopulationMoments {
    pub fn new(mus: Vec<f64>, sigmas_sq: Vec<f64>) -> Result<Self> {
        let k = mus.len();
        if k < 2 {
            return Err(Error::invalid(format!("need K >= 2 thoughts, got {k}")));
        }
        if sigmas_sq.len() != k {
            return Err(Error::invalid("mus and sigmas_sq lengths differ"));
        }
        if sigmas_sq.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("reward variances must be nonnegative"));
        }
        if mus.iter().all(|&m| m == mus[0]) {
            return Err(Error::DegeneratePopulation("all true thought means are equal".into()));
        }
        let mean = mus.iter().sum::<f64>() / k as f64;
        let spread_sq = mus.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (k - 1) as f64;
        if !(spread_sq > 0.0) {
            return Err(Error::DegeneratePopulation("zero spread of true thought means".into()));
        }
        let spread = spread_sq.sqrt();
        let normalized = mus.iter().map(|m| (m - mean) / spread).collect();
        Ok(PopulationMoments { mus, sigmas_sq, mean, spread_sq, normalized })
    }

    pub fn from_env(env: &AnalyticEnv) -> Result<Self> {
        Self::new(env.means().to_vec(), env.variances())
    }

    pub fn k(&self) -> usize {
        self.mus.len()
    }

    pub fn mus(&self) -> &[f64] {
        &self.mus
    }

    pub fn sigmas_sq(&self) -> &[f64] {
        &self.sigmas_sq
    }

    /// μ̄_R.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// σ²_{μ_R}, the K−1 variance of the true means.
    pub fn spread_sq(&self) -> f64 {
        self.spread_sq
    }

    /// μ̃.
    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    fn check_thought(&self, i: usize) -> Result<()> {
        if i >= self.k() {
            return Err(Error::invalid(format!("thought index {i} out of range for K = {}", self.k())));
        }
        Ok(())
    }
}

pub fn normalized_true_advantages(moments: &PopulationMoments) -> Vec<f64> {
    moments.normalized.clone()
}

#[inline]
fn kron(a: usize, b: usize) -> f64 {
    if a == b {
        1.0
    } else {
        0.0
    }
}

fn check_m(m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::invalid("M must be >= 1"));
    }
    Ok(())
}

/// Delta-method prediction of Var[A(th_i)].
pub fn predicted_thought_variance(moments: &PopulationMoments, m: usize, i: usize) -> Result<f64> {
    check_m(m)?;
    moments.check_thought(i)?;
    let k = moments.k();
    if k == 2 {
        // Two standardized values are always ±1/√2: every coefficient
        // cancels, and the sum below would only leave rounding residue.
        return Ok(0.0);
    }
    let kf = k as f64;
    let mt = &moments.normalized;
    let sum: f64 = (0..k)
        .map(|kk| {
            let c = kron(i, kk) - 1.0 / kf - mt[i] * mt[kk] / (kf - 1.0);
            c * c * moments.sigmas_sq[kk]
        })
        .sum();
    Ok(sum / (m as f64 * moments.spread_sq))
}

/// Delta-method prediction of Var[A(ans_{i,j})], evaluated as the literal
/// double sum over all K·M rewards.
pub fn predicted_answer_variance(moments: &PopulationMoments, m: usize, i: usize, j: usize) -> Result<f64> {
    check_m(m)?;
    moments.check_thought(i)?;
    if j >= m {
        return Err(Error::invalid(format!("answer index {j} out of range for M = {m}")));
    }
    let k = moments.k();
    let (kf, mf) = (k as f64, m as f64);
    let kmf = kf * mf;
    let mt = &moments.normalized;
    let mut sum = 0.0;
    for kk in 0..k {
        for mm in 0..m {
            let delta = if kk == i && mm == j { 1.0 } else { 0.0 };
            let c = delta - 1.0 / kmf - mt[i] * mt[kk] / (mf * (kf - 1.0));
            sum += c * c * moments.sigmas_sq[kk];
        }
    }
    Ok((kmf - 1.0) / (mf * (kf - 1.0) * moments.spread_sq) * sum)
}

/// Gradient ∂f_i/∂V_k of the standardized advantage at an arbitrary point V.
pub fn advantage_gradient(values: &[f64], i: usize) -> Result<Vec<f64>> {
    let k = values.len();
    if k < 2 {
        return Err(Error::invalid(format!("need K >= 2 values, got {k}")));
    }
    if i >= k {
        return Err(Error::invalid(format!("index {i} out of range for K = {k}")));
    }
    let kf = k as f64;
    let mean = values.iter().sum::<f64>() / kf;
    let q = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (kf - 1.0);
    let d = q.sqrt();
    if !(d > 0.0) {
        return Err(Error::DegeneratePopulation("values have zero spread".into()));
    }
    let ci = values[i] - mean;
    Ok(values
        .iter()
        .enumerate()
        .map(|(kk, v)| (kron(i, kk) - 1.0 / kf) / d - ci * (v - mean) / ((kf - 1.0) * d * d * d))
        .collect())
}

/// `σ²_{R_i} / (M σ²_π)`, the K → ∞ limit of the thought-advantage variance.
pub fn asymptotic_limit(sigma_ri_sq: f64, m: usize, sigma_pi_sq: f64) -> Result<f64> {
    check_m(m)?;
    if !(sigma_pi_sq > 0.0) {
        return Err(Error::DegeneratePopulation("population variance of thought values must be > 0".into()));
    }
    if !(sigma_ri_sq >= 0.0) {
        return Err(Error::invalid("reward variance must be nonnegative"));
    }
    Ok(sigma_ri_sq / (m as f64 * sigma_pi_sq))
}

/// Predictions for every thought (and optionally every answer) at one M.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariancePrediction {
    pub m: usize,
    pub per_thought: Vec<f64>,
    pub per_answer: Option<Matrix>,
}

pub fn predict(moments: &PopulationMoments, m: usize, with_answers: bool) -> Result<VariancePrediction> {
    let per_thought = (0..moments.k())
        .map(|i| predicted_thought_variance(moments, m, i))
        .collect::<Result<Vec<_>>>()?;
    let per_answer = if with_answers {
        let mut out = Matrix::zeros(moments.k(), m);
        for i in 0..moments.k() {
            // Within-row entries coincide; evaluate once per row.
            let v = predicted_answer_variance(moments, m, i, 0)?;
            out.row_mut(i).fill(v);
        }
        Some(out)
    } else {
        None
    };
    Ok(VariancePrediction { m, per_thought, per_answer })
}
