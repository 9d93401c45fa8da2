//! `train` and `compare`.
//!
//! Wall-clock timings go to `timing.json` so the deterministic outputs stay
//! byte-identical across runs.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{gss_series, moving_average, TrainRunLog};
use crate::sampling::GroupConfig;
use crate::stats::median;
use crate::trainer::{train, Mode};

use super::config::ExperimentConfig;
use super::provenance;
use super::report::{write_csv, write_json, write_summary, LineChart, Series};

const GSS_THRESHOLD: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRow {
    pub step: usize,
    pub mean_reward: f64,
    pub smoothed_reward: f64,
    pub grad_norm: f64,
    pub gss: Option<f64>,
    pub objective: f64,
    pub thought_adv_abs_mean: f64,
    pub answer_adv_abs_mean: f64,
    pub inconsistency_rate: f64,
    pub nonzero_groups: usize,
    pub groups: usize,
}

/// Headline numbers of one training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub final_smoothed_reward: f64,
    /// `None` when every gradient norm was zero.
    pub gss_at_10: Option<usize>,
    pub max_gss: Option<f64>,
    pub no_zero_rate: f64,
    pub inconsistency_rate: f64,
    pub final_kl: f64,
}

impl RunMetrics {
    fn from_log(log: &TrainRunLog, window: usize) -> Result<Self> {
        Ok(RunMetrics {
            final_smoothed_reward: log.final_smoothed_reward(window)?,
            gss_at_10: log.gss_at(GSS_THRESHOLD).ok(),
            max_gss: gss_series(&log.grad_norms()).ok().and_then(|g| g.into_iter().reduce(f64::max)),
            no_zero_rate: log.no_zero_rate()?,
            inconsistency_rate: log.mean_inconsistency(),
            final_kl: log.final_kl,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub group: GroupConfig,
    pub mode: Mode,
    pub steps: usize,
    pub smoothing_window: usize,
    #[serde(flatten)]
    pub metrics: RunMetrics,
    #[serde(skip)]
    pub log: TrainRunLog,
    #[serde(skip)]
    pub seconds_per_step: f64,
}

impl TrainSummary {
    pub fn digest(&self) -> String {
        format!(
            "{} ({:?}): final smoothed reward {:.4}, GSS@10 {}, NoZeroRate {:.4}",
            self.group,
            self.mode,
            self.metrics.final_smoothed_reward,
            self.metrics.gss_at_10.map_or("undefined".to_string(), |g| g.to_string()),
            self.metrics.no_zero_rate
        )
    }
}

#[derive(Serialize)]
struct Timing {
    seconds_total: f64,
    seconds_per_step: f64,
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    let section = cfg.section(&cfg.train, "train")?;
    let group = section.group.ok_or_else(|| Error::Config("[train] needs a `group` such as \"T4A4\"".into()))?;
    let tc = section.train_config(group, cfg.seed)?;
    let task = cfg.task.clone().unwrap_or_default();
    let env = task.build(cfg.seed)?;
    if tc.mode == Mode::NoThink && task.thought_len != 0 {
        return Err(Error::Config("mode no_think needs [task] thought_len = 0".into()));
    }

    let start = Instant::now();
    let log = train(&env, &tc)?;
    let elapsed = start.elapsed().as_secs_f64();

    let window = section.smoothing_window;
    let smoothed = moving_average(&log.rewards(), window)?;
    let gss = gss_series(&log.grad_norms()).ok();
    let rows: Vec<StepRow> = log
        .records
        .iter()
        .enumerate()
        .map(|(t, r)| StepRow {
            step: r.step,
            mean_reward: r.mean_reward,
            smoothed_reward: smoothed[t],
            grad_norm: r.grad_norm,
            gss: gss.as_ref().map(|g| g[t]),
            objective: r.objective,
            thought_adv_abs_mean: r.thought_adv_abs_mean,
            answer_adv_abs_mean: r.answer_adv_abs_mean,
            inconsistency_rate: r.inconsistency_rate,
            nonzero_groups: r.group_totals.iter().filter(|&&x| x > 0.0).count(),
            groups: r.group_totals.len(),
        })
        .collect();

    let summary = TrainSummary {
        group,
        mode: tc.mode,
        steps: tc.steps,
        smoothing_window: window,
        metrics: RunMetrics::from_log(&log, window)?,
        seconds_per_step: elapsed / tc.steps as f64,
        log,
    };
    let prov = provenance(cfg);
    write_csv(out, &prov, &rows)?;
    write_summary(out, &prov, "train", &summary)?;
    LineChart {
        title: format!("Training reward, {group}"),
        x_label: "step".into(),
        y_label: format!("mean reward (window {window})"),
        log_x: false,
        log_y: false,
        series: vec![Series {
            name: group.to_string(),
            points: smoothed.iter().enumerate().map(|(t, &y)| (t as f64, y)).collect(),
        }],
    }
    .write(out, &prov)?;
    write_json(
        &out.join("timing.json"),
        &Timing { seconds_total: elapsed, seconds_per_step: summary.seconds_per_step },
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub group: GroupConfig,
    pub mode: Mode,
    pub run_seed: u64,
    /// "ok", or the divergence message.
    pub status: String,
    pub final_smoothed_reward: Option<f64>,
    pub gss_at_10: Option<usize>,
    pub max_gss: Option<f64>,
    pub no_zero_rate: Option<f64>,
    pub inconsistency_rate: Option<f64>,
    pub final_kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairStats {
    pub group: GroupConfig,
    pub runs: usize,
    pub diverged: usize,
    pub median_final_smoothed_reward: Option<f64>,
    pub median_gss_at_10: Option<f64>,
    pub median_no_zero_rate: Option<f64>,
    pub median_inconsistency_rate: Option<f64>,
}

/// Per-seed comparison of group `a` against group `b` over the seeds where
/// both runs finished.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairwiseStats {
    pub a: GroupConfig,
    pub b: GroupConfig,
    pub paired_seeds: usize,
    pub a_reward_ge_b: usize,
    pub a_no_zero_rate_gt_b: usize,
    pub a_gss_at_10_le_b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareSummary {
    pub steps: usize,
    pub smoothing_window: usize,
    pub seeds: Vec<u64>,
    pub pairs: Vec<PairStats>,
    pub pairwise: Vec<PairwiseStats>,
    #[serde(skip)]
    pub rows: Vec<CompareRow>,
    #[serde(skip)]
    pub seconds_per_step: Vec<(GroupConfig, f64)>,
}

impl CompareSummary {
    pub fn digest(&self) -> String {
        let mut s = format!(
            "{:<8} {:>5} {:>9} {:>12} {:>10} {:>12} {:>14}\n",
            "group", "runs", "diverged", "reward(med)", "GSS@10(med)", "NoZero(med)", "incons.(med)"
        );
        let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        for p in &self.pairs {
            s.push_str(&format!(
                "{:<8} {:>5} {:>9} {:>12} {:>10} {:>12} {:>14}\n",
                p.group.to_string(),
                p.runs,
                p.diverged,
                fmt(p.median_final_smoothed_reward),
                fmt(p.median_gss_at_10),
                fmt(p.median_no_zero_rate),
                fmt(p.median_inconsistency_rate)
            ));
        }
        for (g, t) in &self.seconds_per_step {
            s.push_str(&format!("{g}: {:.3} ms/step\n", t * 1e3));
        }
        s.trim_end().to_string()
    }

    pub fn pair(&self, g: GroupConfig) -> Option<&PairStats> {
        self.pairs.iter().find(|p| p.group == g)
    }

    pub fn pairwise(&self, a: GroupConfig, b: GroupConfig) -> Option<&PairwiseStats> {
        self.pairwise.iter().find(|p| p.a == a && p.b == b)
    }
}

fn median_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| median(&v))
}

pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path) -> Result<CompareSummary> {
    let section = cfg.section(&cfg.train, "train")?;
    let cmp = cfg.section(&cfg.compare, "compare")?;
    if cmp.pairs.is_empty() {
        return Err(Error::Config("[compare] pairs is empty".into()));
    }
    let seeds = cmp.seeds(cfg.seed);
    if seeds.is_empty() {
        return Err(Error::Config("[compare] needs at least one seed".into()));
    }
    let task = cfg.task.clone().unwrap_or_default();
    let window = section.smoothing_window;
    // Validate every pair up front so a bad group is a config error.
    let configs = cmp
        .pairs
        .iter()
        .map(|&g| section.train_config(g, 0).map(|_| g))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut curves: Vec<Vec<Vec<f64>>> = vec![Vec::new(); configs.len()];
    let mut elapsed = vec![(0.0f64, 0usize); configs.len()];
    for &seed in &seeds {
        let env = task.build(seed)?;
        for (n, &group) in configs.iter().enumerate() {
            let tc = section.train_config(group, seed)?;
            let start = Instant::now();
            let result = train(&env, &tc);
            let secs = start.elapsed().as_secs_f64();
            let row = match result {
                Ok(log) => {
                    elapsed[n].0 += secs;
                    elapsed[n].1 += tc.steps;
                    let m = RunMetrics::from_log(&log, window)?;
                    curves[n].push(moving_average(&log.rewards(), window)?);
                    CompareRow {
                        group,
                        mode: tc.mode,
                        run_seed: seed,
                        status: "ok".into(),
                        final_smoothed_reward: Some(m.final_smoothed_reward),
                        gss_at_10: m.gss_at_10,
                        max_gss: m.max_gss,
                        no_zero_rate: Some(m.no_zero_rate),
                        inconsistency_rate: Some(m.inconsistency_rate),
                        final_kl: Some(m.final_kl),
                    }
                }
                Err(e @ Error::Divergence { .. }) => CompareRow {
                    group,
                    mode: tc.mode,
                    run_seed: seed,
                    status: e.to_string(),
                    final_smoothed_reward: None,
                    gss_at_10: None,
                    max_gss: None,
                    no_zero_rate: None,
                    inconsistency_rate: None,
                    final_kl: None,
                },
                Err(e) => return Err(e),
            };
            rows.push(row);
        }
    }

    let ok = |g: GroupConfig| rows.iter().filter(move |r| r.group == g && r.status == "ok");
    let pairs: Vec<PairStats> = configs
        .iter()
        .map(|&g| PairStats {
            group: g,
            runs: rows.iter().filter(|r| r.group == g).count(),
            diverged: rows.iter().filter(|r| r.group == g && r.status != "ok").count(),
            median_final_smoothed_reward: median_of(ok(g).filter_map(|r| r.final_smoothed_reward)),
            median_gss_at_10: median_of(ok(g).filter_map(|r| r.gss_at_10.map(|x| x as f64))),
            median_no_zero_rate: median_of(ok(g).filter_map(|r| r.no_zero_rate)),
            median_inconsistency_rate: median_of(ok(g).filter_map(|r| r.inconsistency_rate)),
        })
        .collect();

    let find = |g: GroupConfig, s: u64| rows.iter().find(|r| r.group == g && r.run_seed == s && r.status == "ok");
    let mut pairwise = Vec::new();
    for &a in &configs {
        for &b in &configs {
            if a == b {
                continue;
            }
            let mut p = PairwiseStats { a, b, paired_seeds: 0, a_reward_ge_b: 0, a_no_zero_rate_gt_b: 0, a_gss_at_10_le_b: 0 };
            for &s in &seeds {
                if let (Some(ra), Some(rb)) = (find(a, s), find(b, s)) {
                    p.paired_seeds += 1;
                    p.a_reward_ge_b += usize::from(ra.final_smoothed_reward >= rb.final_smoothed_reward);
                    p.a_no_zero_rate_gt_b += usize::from(ra.no_zero_rate > rb.no_zero_rate);
                    p.a_gss_at_10_le_b += usize::from(ra.gss_at_10.unwrap_or(0) <= rb.gss_at_10.unwrap_or(0));
                }
            }
            pairwise.push(p);
        }
    }

    let summary = CompareSummary {
        steps: section.steps,
        smoothing_window: window,
        seeds: seeds.clone(),
        pairs,
        pairwise,
        seconds_per_step: configs
            .iter()
            .zip(&elapsed)
            .map(|(&g, &(secs, steps))| (g, if steps > 0 { secs / steps as f64 } else { f64::NAN }))
            .collect(),
        rows,
    };
    let prov = provenance(cfg);
    write_csv(out, &prov, &summary.rows)?;
    write_summary(out, &prov, "compare", &summary)?;
    let series = configs
        .iter()
        .zip(&curves)
        .filter(|(_, c)| !c.is_empty())
        .map(|(g, c)| Series {
            name: format!("{g} (mean of {} seeds)", c.len()),
            points: (0..c[0].len())
                .map(|t| (t as f64, c.iter().map(|curve| curve[t]).sum::<f64>() / c.len() as f64))
                .collect(),
        })
        .collect();
    LineChart {
        title: "Smoothed training reward".into(),
        x_label: "step".into(),
        y_label: format!("mean reward (window {window})"),
        log_x: false,
        log_y: false,
        series,
    }
    .write(out, &prov)?;
    let timing: Vec<serde_json::Value> = summary
        .seconds_per_step
        .iter()
        .map(|(g, t)| serde_json::json!({ "group": g, "seconds_per_step": t }))
        .collect();
    write_json(&out.join("timing.json"), &timing)?;
    Ok(summary)
}
