//! Group-relative policy optimization with multi-answer sampling (GRPO-MA).
//!
//! The crate has two halves. The estimator half ([`advantage`],
//! [`variance_theory`], [`mc_oracle`]) computes thought/answer advantages
//! from a K×M reward matrix, predicts their variance with a first-order
//! delta expansion, and checks those predictions against brute-force Monte
//! Carlo. The training half ([`envs`], [`sampling`], [`trainer`],
//! [`metrics`]) trains a tabular two-stage softmax policy with the clipped
//! surrogate objective on sparse synthetic token tasks and tracks stability
//! metrics such as the gradient spike score.
//!
//! [`runner`] wires everything into the `grpo-ma` command-line tool.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advantage;
pub mod envs;
pub mod error;
pub mod matrix;
pub mod mc_oracle;
pub mod metrics;
pub mod rng;
pub mod runner;
pub mod sampling;
pub mod stats;
pub mod trainer;
pub mod variance_theory;

pub use advantage::{compute_advantage_set, AdvantageSet};
pub use envs::{AnalyticEnv, RewardFamily, ThoughtDistribution, TokenTaskEnv};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use sampling::{GroupConfig, GroupRollout, RewardMatrix};
