//! Monte Carlo over seeds.

use rayon::prelude::*;
use serde::Serialize;

use super::{run_scenario_with, RunOptions, ScenarioConfig};
use crate::error::Result;
use crate::seed::trial_seed;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialVerdict {
    Success,
    Miss,
    /// Never fired within the run.
    NoLaunch,
    Aborted { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub trial: u64,
    pub seed: u64,
    pub verdict: TrialVerdict,
    pub trigger_time: Option<f64>,
    pub first_enclosure_time: Option<f64>,
    pub position_rmse: Option<f64>,
    pub velocity_rmse: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatchSummary {
    pub successes: usize,
    /// Launched without capture, plus runs that never launched.
    pub misses: usize,
    pub aborted: usize,
    pub rate: f64,
    /// 95% Wilson interval on `rate`.
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchReport {
    pub summary: BatchSummary,
    pub trials: Vec<TrialOutcome>,
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Success rate over the non-aborted trials.
pub fn summarize_verdicts(captured: &[bool], aborted: usize) -> BatchSummary {
    let n = captured.len();
    let successes = captured.iter().filter(|&&c| c).count();
    let (ci_low, ci_high) = wilson_interval(successes, n, 1.96);
    BatchSummary {
        successes,
        misses: n - successes,
        aborted,
        rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
        ci_low,
        ci_high,
    }
}

/// Runs `trials` independent copies of `cfg`, trial `k` seeded from
/// `master_seed` and `k`. Results come back in trial order regardless of
/// thread count.
pub fn monte_carlo(cfg: &ScenarioConfig, trials: u64, master_seed: u64) -> Result<BatchReport> {
    cfg.validate()?;
    let outcomes: Vec<TrialOutcome> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let seed = trial_seed(master_seed, k);
            let mut c = cfg.clone();
            c.seed = seed;
            let mut out = TrialOutcome {
                trial: k,
                seed,
                verdict: TrialVerdict::NoLaunch,
                trigger_time: None,
                first_enclosure_time: None,
                position_rmse: None,
                velocity_rmse: None,
            };
            match run_scenario_with(&c, RunOptions { record_traces: false }) {
                Ok(run) => {
                    let m = run.metrics;
                    out.trigger_time = m.triggers.first().map(|t| t.t);
                    out.position_rmse = m.mean_position_rmse();
                    out.velocity_rmse = m.mean_velocity_rmse();
                    if let Some(v) = m.verdict {
                        out.first_enclosure_time = v.first_enclosure_time;
                        out.verdict = if v.captured { TrialVerdict::Success } else { TrialVerdict::Miss };
                    }
                }
                Err(e) => {
                    log::warn!("trial {k} aborted: {e}");
                    out.verdict = TrialVerdict::Aborted { reason: e.to_string() };
                }
            }
            out
        })
        .collect();
    let aborted = outcomes
        .iter()
        .filter(|o| matches!(o.verdict, TrialVerdict::Aborted { .. }))
        .count();
    let captured: Vec<bool> = outcomes
        .iter()
        .filter(|o| !matches!(o.verdict, TrialVerdict::Aborted { .. }))
        .map(|o| o.verdict == TrialVerdict::Success)
        .collect();
    Ok(BatchReport {
        summary: summarize_verdicts(&captured, aborted),
        trials: outcomes,
    })
}
