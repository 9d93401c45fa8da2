//! Tabular two-stage softmax policy.
//!
//! Thought tokens are drawn independently per position from
//! `softmax(thought_logits[prompt, pos])`. Answer tokens are drawn per
//! position from `softmax(answer_logits[prompt, thought_context, pos])`, where
//! the context is the mixed-radix code of the whole thought sequence.

use std::ops::Deref;

use rand::Rng;

use crate::envs::TaskShape;
use crate::rng::Stream;

/// Identifies one categorical distribution of the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Thought { prompt: usize, pos: usize },
    Answer { prompt: usize, context: usize, pos: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStagePolicy {
    shape: TaskShape,
    thought_logits: Vec<f64>,
    answer_logits: Vec<f64>,
}

/// Gradient with the same layout as the policy logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    pub thought: Vec<f64>,
    pub answer: Vec<f64>,
}

impl PolicyGradient {
    pub fn zeros(shape: &TaskShape) -> Self {
        PolicyGradient {
            thought: vec![0.0; thought_len(shape)],
            answer: vec![0.0; answer_len(shape)],
        }
    }

    pub fn add_scaled(&mut self, other: &PolicyGradient, scale: f64) {
        for (a, b) in self.thought.iter_mut().zip(&other.thought) {
            *a += scale * b;
        }
        for (a, b) in self.answer.iter_mut().zip(&other.answer) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.thought.iter_mut().chain(self.answer.iter_mut()).for_each(|x| *x *= s);
    }

    pub fn l2_norm(&self) -> f64 {
        self.thought.iter().chain(&self.answer).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.thought.iter().chain(&self.answer).copied()
    }
}

fn thought_len(s: &TaskShape) -> usize {
    s.num_prompts * s.thought_len * s.thought_vocab
}

fn answer_len(s: &TaskShape) -> usize {
    s.num_prompts * s.thought_contexts() * s.answer_len * s.answer_vocab
}

impl TwoStagePolicy {
    /// All logits zero (uniform distributions).
    pub fn uniform(shape: TaskShape) -> Self {
        TwoStagePolicy {
            thought_logits: vec![0.0; thought_len(&shape)],
            answer_logits: vec![0.0; answer_len(&shape)],
            shape,
        }
    }

    pub fn shape(&self) -> &TaskShape {
        &self.shape
    }

    fn range(&self, slot: Slot) -> (bool, std::ops::Range<usize>) {
        let s = &self.shape;
        match slot {
            Slot::Thought { prompt, pos } => {
                let start = (prompt * s.thought_len + pos) * s.thought_vocab;
                (true, start..start + s.thought_vocab)
            }
            Slot::Answer { prompt, context, pos } => {
                let start = ((prompt * s.thought_contexts() + context) * s.answer_len + pos) * s.answer_vocab;
                (false, start..start + s.answer_vocab)
            }
        }
    }

    pub fn logits(&self, slot: Slot) -> &[f64] {
        match self.range(slot) {
            (true, r) => &self.thought_logits[r],
            (false, r) => &self.answer_logits[r],
        }
    }

    pub fn logits_mut(&mut self, slot: Slot) -> &mut [f64] {
        match self.range(slot) {
            (true, r) => &mut self.thought_logits[r],
            (false, r) => &mut self.answer_logits[r],
        }
    }

    /// Gradient entries belonging to `slot`.
    pub fn grad_slice<'g>(&self, grad: &'g mut PolicyGradient, slot: Slot) -> &'g mut [f64] {
        match self.range(slot) {
            (true, r) => &mut grad.thought[r],
            (false, r) => &mut grad.answer[r],
        }
    }

    pub fn log_probs(&self, slot: Slot) -> Vec<f64> {
        log_softmax(self.logits(slot))
    }

    pub fn probs(&self, slot: Slot) -> Vec<f64> {
        self.log_probs(slot).into_iter().map(f64::exp).collect()
    }

    pub fn log_prob(&self, slot: Slot, token: usize) -> f64 {
        self.log_probs(slot)[token]
    }

    fn sample_slot(&self, slot: Slot, rng: &mut Stream) -> (usize, f64) {
        let lp = self.log_probs(slot);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (tok, l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                return (tok, *l);
            }
        }
        // u landed in the rounding gap above the cumulative sum.
        let last = lp.iter().rposition(|l| l.is_finite() && *l > f64::NEG_INFINITY).unwrap_or(lp.len() - 1);
        (last, lp[last])
    }

    /// Samples a full thought; returns tokens and their log-probabilities.
    pub fn sample_thought(&self, prompt: usize, rng: &mut Stream) -> (Vec<usize>, Vec<f64>) {
        (0..self.shape.thought_len).map(|pos| self.sample_slot(Slot::Thought { prompt, pos }, rng)).unzip()
    }

    pub fn sample_answer(&self, prompt: usize, context: usize, rng: &mut Stream) -> (Vec<usize>, Vec<f64>) {
        (0..self.shape.answer_len)
            .map(|pos| self.sample_slot(Slot::Answer { prompt, context, pos }, rng))
            .unzip()
    }

    pub fn num_params(&self) -> usize {
        self.thought_logits.len() + self.answer_logits.len()
    }

    /// Flat parameter access: thought logits first, then answer logits.
    pub fn param(&self, idx: usize) -> f64 {
        let t = self.thought_logits.len();
        if idx < t {
            self.thought_logits[idx]
        } else {
            self.answer_logits[idx - t]
        }
    }

    pub fn set_param(&mut self, idx: usize, v: f64) {
        let t = self.thought_logits.len();
        if idx < t {
            self.thought_logits[idx] = v;
        } else {
            self.answer_logits[idx - t] = v;
        }
    }

    /// Gradient-ascent step `θ ← θ + lr · g`.
    pub fn apply(&mut self, grad: &PolicyGradient, lr: f64) {
        for (p, g) in self.thought_logits.iter_mut().zip(&grad.thought) {
            *p += lr * g;
        }
        for (p, g) in self.answer_logits.iter_mut().zip(&grad.answer) {
            *p += lr * g;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.thought_logits.iter().chain(&self.answer_logits).all(|x| x.is_finite())
    }

    /// Every categorical distribution of the policy.
    pub fn slots(&self) -> impl Iterator<Item = Slot> + '_ {
        let s = self.shape;
        let thoughts = (0..s.num_prompts)
            .flat_map(move |prompt| (0..s.thought_len).map(move |pos| Slot::Thought { prompt, pos }));
        let answers = (0..s.num_prompts).flat_map(move |prompt| {
            (0..s.thought_contexts())
                .flat_map(move |context| (0..s.answer_len).map(move |pos| Slot::Answer { prompt, context, pos }))
        });
        thoughts.chain(answers)
    }

    /// Mean exact KL(self ‖ other) over every distribution of the policy.
    pub fn mean_kl(&self, other: &TwoStagePolicy) -> f64 {
        let (sum, n) = self
            .slots()
            .map(|slot| categorical_kl(&self.log_probs(slot), &other.log_probs(slot)))
            .fold((0.0, 0usize), |(s, n), kl| (s + kl, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Puts nearly all mass on token 0 of every distribution.
    pub fn make_one_hot(&mut self, height: f64) {
        let slots: Vec<Slot> = self.slots().collect();
        for slot in slots {
            let row = self.logits_mut(slot);
            row.fill(0.0);
            row[0] = height;
        }
    }
}

/// Frozen copy of the policy taken at the start of training.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy(TwoStagePolicy);

impl ReferencePolicy {
    pub fn new(policy: &TwoStagePolicy) -> Self {
        ReferencePolicy(policy.clone())
    }
}

impl Deref for ReferencePolicy {
    type Target = TwoStagePolicy;
    fn deref(&self) -> &TwoStagePolicy {
        &self.0
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// KL(p ‖ q) from log-probabilities.
pub fn categorical_kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(lp, lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn shape() -> TaskShape {
        TaskShape { num_prompts: 2, thought_vocab: 3, answer_vocab: 4, thought_len: 2, answer_len: 2 }
    }

    #[test]
    fn layout_covers_all_params_once() {
        let mut p = TwoStagePolicy::uniform(shape());
        assert_eq!(p.num_params(), 2 * 2 * 3 + 2 * 9 * 2 * 4);
        let slots: Vec<Slot> = p.slots().collect();
        for (n, slot) in slots.iter().enumerate() {
            p.logits_mut(*slot).fill(n as f64);
        }
        for (n, slot) in slots.iter().enumerate() {
            assert!(p.logits(*slot).iter().all(|&x| x == n as f64));
        }
    }

    #[test]
    fn softmax_normalizes() {
        let mut p = TwoStagePolicy::uniform(shape());
        let mut r = rng::stream(3);
        for i in 0..p.num_params() {
            p.set_param(i, r.random_range(-30.0..30.0));
        }
        for slot in p.slots() {
            let s: f64 = p.probs(slot).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_of_identical_policies_is_zero() {
        let p = TwoStagePolicy::uniform(shape());
        assert_eq!(p.mean_kl(&p), 0.0);
        let mut q = p.clone();
        q.set_param(0, 1.0);
        assert!(q.mean_kl(&p) > 0.0);
    }

    #[test]
    fn sampling_frequencies_follow_probabilities() {
        let mut p = TwoStagePolicy::uniform(shape());
        p.logits_mut(Slot::Thought { prompt: 0, pos: 0 }).copy_from_slice(&[0.0, (2.0f64).ln(), (3.0f64).ln()]);
        let mut r = rng::stream(1);
        let mut counts = [0usize; 3];
        for _ in 0..60_000 {
            counts[p.sample_thought(0, &mut r).0[0]] += 1;
        }
        for (c, want) in counts.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((*c as f64 / 60_000.0 - want).abs() < 0.01);
        }
    }
}
