//! Condition × seed sweeps and their persisted outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;

use super::config::{Condition, ExperimentConfig};
use super::episode::{heldout_for_seed, run_episode_with, EpisodeRecord};

pub const METRICS_HEADER: [&str; 9] = [
    "experiment",
    "condition",
    "seed",
    "step",
    "param_error",
    "cov_trace",
    "task_cost",
    "info_cost",
    "wall_ms",
];

pub const HELDOUT_HEADER: [&str; 5] = [
    "experiment",
    "condition",
    "seed",
    "heldout_single_step_err",
    "heldout_autoregressive_err",
];

pub const METRICS_FILE: &str = "metrics.csv";
pub const HELDOUT_FILE: &str = "heldout.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, Serialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub episodes: usize,
    pub median_final_param_error: f64,
    pub median_final_cov_trace: f64,
    pub median_heldout_single_step_err: f64,
    pub median_heldout_autoregressive_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OrderingCheck {
    pub metric: String,
    pub better: String,
    pub worse: String,
    pub better_median: f64,
    pub worse_median: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct AbortedEpisode {
    pub condition: String,
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub experiment: String,
    pub version: String,
    pub conditions: Vec<ConditionSummary>,
    pub checks: Vec<OrderingCheck>,
    pub aborted: Vec<AbortedEpisode>,
    pub config: serde_json::Value,
}

impl Summary {
    pub fn condition(&self, name: &str) -> Option<&ConditionSummary> {
        self.conditions.iter().find(|c| c.condition == name)
    }

    pub fn all_checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub records: Vec<EpisodeRecord>,
    pub summary: Summary,
    pub metrics_path: PathBuf,
    pub heldout_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Median of the finite values; NaN if there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Run every (condition, seed) pair, then write metrics, held-out errors and
/// the summary into `cfg.output_dir`. Episodes run in parallel; output order
/// is (condition, seed, step) regardless of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let sys = cfg.build_system()?;
    let heldout: Vec<_> = cfg
        .seeds
        .par_iter()
        .map(|&seed| heldout_for_seed(cfg, sys.as_ref(), seed))
        .collect::<Result<_>>()?;
    let jobs: Vec<(Condition, usize)> = cfg
        .conditions()
        .into_iter()
        .flat_map(|c| (0..cfg.seeds.len()).map(move |i| (c, i)))
        .collect();
    let records: Vec<EpisodeRecord> = jobs
        .par_iter()
        .map(|&(condition, i)| {
            run_episode_with(cfg, sys.as_ref(), &heldout[i], condition, cfg.seeds[i])
        })
        .collect::<Result<_>>()?;

    fs::create_dir_all(&cfg.output_dir)?;
    let metrics_path = cfg.output_dir.join(METRICS_FILE);
    let heldout_path = cfg.output_dir.join(HELDOUT_FILE);
    let summary_path = cfg.output_dir.join(SUMMARY_FILE);
    write_metrics(&metrics_path, &cfg.experiment, &records)?;
    write_heldout(&heldout_path, &cfg.experiment, &records)?;
    let summary = summarize(cfg, &records);
    write_summary(&summary_path, &summary)?;
    Ok(ExperimentReport {
        records,
        summary,
        metrics_path,
        heldout_path,
        summary_path,
    })
}

/// Metrics rows for `records` in the order given.
pub fn write_metrics_to<W: Write>(
    out: W,
    experiment: &str,
    records: &[EpisodeRecord],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for rec in records {
        let condition = rec.condition.name();
        let seed = rec.seed.to_string();
        for row in &rec.rows {
            w.write_record([
                experiment,
                &condition,
                &seed,
                &row.step.to_string(),
                &row.param_error.to_string(),
                &row.cov_trace.to_string(),
                &row.task_cost.to_string(),
                &row.info_cost.to_string(),
                &row.wall_ms.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_metrics(path: &Path, experiment: &str, records: &[EpisodeRecord]) -> Result<()> {
    write_metrics_to(fs::File::create(path)?, experiment, records)
}

fn write_heldout(path: &Path, experiment: &str, records: &[EpisodeRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HELDOUT_HEADER)?;
    for rec in records {
        let (single, auto) = rec
            .heldout
            .map_or((f64::NAN, f64::NAN), |h| (h.single_step, h.autoregressive));
        w.write_record([
            experiment,
            &rec.condition.name(),
            &rec.seed.to_string(),
            &single.to_string(),
            &auto.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

type MetricFn = fn(&EpisodeRecord) -> f64;

const METRICS: [(&str, MetricFn); 4] = [
    ("final_param_error", |r| {
        r.final_row().map_or(f64::NAN, |x| x.param_error)
    }),
    ("final_cov_trace", |r| {
        r.final_row().map_or(f64::NAN, |x| x.cov_trace)
    }),
    ("heldout_single_step_err", |r| {
        r.heldout.map_or(f64::NAN, |h| h.single_step)
    }),
    ("heldout_autoregressive_err", |r| {
        r.heldout.map_or(f64::NAN, |h| h.autoregressive)
    }),
];

/// Per-condition medians, ordering checks for the largest λ against λ = 0 and
/// random, and the list of aborted episodes.
pub fn summarize(cfg: &ExperimentConfig, records: &[EpisodeRecord]) -> Summary {
    let conditions = cfg.conditions();
    let medians = |c: Condition, f: MetricFn| {
        let values: Vec<f64> = records
            .iter()
            .filter(|r| r.condition == c && r.aborted.is_none())
            .map(f)
            .collect();
        median(&values)
    };

    let summaries = conditions
        .iter()
        .map(|&c| ConditionSummary {
            condition: c.name(),
            episodes: records.iter().filter(|r| r.condition == c).count(),
            median_final_param_error: medians(c, METRICS[0].1),
            median_final_cov_trace: medians(c, METRICS[1].1),
            median_heldout_single_step_err: medians(c, METRICS[2].1),
            median_heldout_autoregressive_err: medians(c, METRICS[3].1),
        })
        .collect();

    let mut checks = Vec::new();
    let active = conditions
        .iter()
        .filter_map(|c| c.lambda().filter(|l| *l > 0.0))
        .fold(None, |acc: Option<f64>, l| {
            Some(acc.map_or(l, |a| a.max(l)))
        });
    if let Some(top) = active.map(Condition::Lambda) {
        for other in [Condition::Lambda(0.0), Condition::Random] {
            if !conditions.contains(&other) {
                continue;
            }
            for (name, f) in METRICS {
                let better_median = medians(top, f);
                let worse_median = medians(other, f);
                checks.push(OrderingCheck {
                    metric: name.to_string(),
                    better: top.name(),
                    worse: other.name(),
                    better_median,
                    worse_median,
                    passed: better_median < worse_median,
                });
            }
        }
    }

    let aborted = records
        .iter()
        .filter_map(|r| {
            r.aborted.as_ref().map(|reason| AbortedEpisode {
                condition: r.condition.name(),
                seed: r.seed,
                reason: reason.clone(),
            })
        })
        .collect();

    Summary {
        experiment: cfg.experiment.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        conditions: summaries,
        checks,
        aborted,
        config: cfg.to_json(),
    }
}
