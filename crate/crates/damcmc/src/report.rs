//! Post-processing of chain logs: per-chain metric summaries, pairwise
//! efficiency ratios against a single-stage baseline, the report JSON, and
//! plot-ready CSV files.

use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    acceptance_summary, autocorrelations, ess, iact, mc_estimate, speedup,
};
use crate::error::{Error, Result};
use crate::record::StepRow;

/// Mean and corrected error bar of one coordinate, `None` when the
/// post-burn-in sample is too short to estimate the autocorrelation time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoordEstimate {
    pub coord: usize,
    pub mean: f64,
    pub se: Option<f64>,
    pub tau: Option<f64>,
}

/// Summary of one chain log. Diagnostic fields are `None` when undefined:
/// second-stage rates without promotions, autocorrelation times on chains
/// shorter than 100 post-burn-in steps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainMetrics {
    pub chain: String,
    pub steps: u64,
    pub burn_in_steps: u64,
    pub alpha_bar: f64,
    /// Second-stage acceptance frequency, the headline rate.
    pub beta_bar: Option<f64>,
    /// Mean of the logged second-stage probabilities.
    pub beta_mean: Option<f64>,
    pub iact_loglik: Option<f64>,
    pub iact_degenerate: bool,
    pub ess: Option<f64>,
    /// Median exact-map seconds per evaluation, when any were logged.
    pub t_exact_s: Option<f64>,
    /// Median reduced-map seconds per evaluation, when any were logged.
    pub t_reduced_s: Option<f64>,
    pub estimates: Vec<CoordEstimate>,
}

/// One efficiency comparison against the baseline chain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpeedupEntry {
    pub chain: String,
    pub tau_baseline: f64,
    pub tau_chain: f64,
    pub alpha_bar: f64,
    pub t_reduced_s: f64,
    pub t_exact_s: f64,
    pub speedup: f64,
}

/// The report JSON payload.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: Option<String>,
    pub burn_in_fraction: f64,
    pub chains: Vec<ChainMetrics>,
    pub baseline: Option<String>,
    pub speedups: Vec<SpeedupEntry>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig {
            field: "report.json".into(),
            reason: e.to_string(),
        })
    }
}

/// Steps excluded from diagnostics at the given fraction.
pub fn burn_in_steps(steps: u64, fraction: f64) -> u64 {
    (steps as f64 * fraction).floor() as u64
}

/// Rows after burn-in: drops the initial row and the first
/// `burn_in_steps(N, fraction)` steps.
pub fn post_burn_in(rows: &[StepRow], fraction: f64) -> &[StepRow] {
    if rows.is_empty() {
        return rows;
    }
    let steps = rows.len() as u64 - 1;
    let skip = burn_in_steps(steps, fraction) + 1;
    &rows[(skip as usize).min(rows.len())..]
}

/// The exact log-posterior series with blanks carried forward. Blank rows
/// never move the state, so the carried value is exact, not interpolated.
/// `prior_value` seeds the carry for series that start blank.
pub fn carried_log_post(rows: &[StepRow], prior_value: Option<f64>) -> Result<Vec<f64>> {
    let mut last = prior_value;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        if row.log_post.is_some() {
            last = row.log_post;
        }
        out.push(last.ok_or_else(|| Error::InvalidConfig {
            field: "chain.csv".into(),
            reason: format!("no exact log-posterior value at or before step {}", row.step),
        })?);
    }
    Ok(out)
}

fn median_seconds(values: impl Iterator<Item = u64>) -> Option<f64> {
    let mut ns: Vec<u64> = values.collect();
    if ns.is_empty() {
        return None;
    }
    ns.sort_unstable();
    let mid = ns.len() / 2;
    let median = if ns.len().is_multiple_of(2) {
        (ns[mid - 1] as f64 + ns[mid] as f64) / 2.0
    } else {
        ns[mid] as f64
    };
    Some(median * 1e-9)
}

/// Computes the full metric summary of one chain log. The log-posterior
/// series uses every row (carry needs the start), estimates and rates use
/// post-burn-in rows only.
pub fn chain_metrics(label: &str, rows: &[StepRow], burn_in_fraction: f64) -> Result<ChainMetrics> {
    if rows.is_empty() {
        return Err(Error::InvalidConfig {
            field: "chain.csv".into(),
            reason: "chain log has no rows".into(),
        });
    }
    let steps = rows.len() as u64 - 1;
    let burn = burn_in_steps(steps, burn_in_fraction);
    let tail = post_burn_in(rows, burn_in_fraction);
    let summary = acceptance_summary(tail);

    let log_post_all = carried_log_post(rows, None)?;
    let log_post_tail = &log_post_all[(burn as usize + 1).min(log_post_all.len())..];
    let (iact_loglik, iact_degenerate, ess_value) = if log_post_tail.len() >= 100 {
        let est = iact(log_post_tail)?;
        (
            Some(est.tau),
            est.degenerate,
            Some(ess(log_post_tail.len(), est.tau)),
        )
    } else {
        (None, false, None)
    };

    let dim = rows[0].x.len();
    let mut estimates = Vec::with_capacity(dim);
    for coord in 0..dim {
        let series: Vec<f64> = tail.iter().map(|r| r.x[coord]).collect();
        if series.len() >= 100 {
            let est = mc_estimate(&series)?;
            estimates.push(CoordEstimate {
                coord,
                mean: est.mean,
                se: Some(est.se),
                tau: Some(est.tau),
            });
        } else if !series.is_empty() {
            estimates.push(CoordEstimate {
                coord,
                mean: series.iter().sum::<f64>() / series.len() as f64,
                se: None,
                tau: None,
            });
        }
    }

    Ok(ChainMetrics {
        chain: label.to_string(),
        steps,
        burn_in_steps: burn,
        alpha_bar: summary.stage1_rate,
        beta_bar: summary.stage2_rate,
        beta_mean: summary.beta_mean,
        iact_loglik,
        iact_degenerate,
        ess: ess_value,
        t_exact_s: median_seconds(rows.iter().filter_map(|r| r.t_exact_ns)),
        t_reduced_s: median_seconds(rows.iter().filter_map(|r| r.t_reduced_ns)),
        estimates,
    })
}

/// Externally supplied timing overrides for the efficiency ratio.
#[derive(Clone, Copy, Debug, Default)]
pub struct TimingOverride {
    pub t_reduced_s: Option<f64>,
    pub t_exact_s: Option<f64>,
}

/// Builds the report over several chains, with pairwise efficiency ratios
/// against the named baseline when one is designated. The baseline supplies
/// the single-stage autocorrelation time and the exact-map cost; each
/// two-stage chain supplies its own autocorrelation time, stage-1 rate, and
/// reduced-map cost.
pub fn build_report(
    chains: Vec<ChainMetrics>,
    baseline: Option<&str>,
    burn_in_fraction: f64,
    config_hash: Option<String>,
    timing: TimingOverride,
) -> Result<Report> {
    let mut speedups = Vec::new();
    if let Some(name) = baseline {
        let base = chains
            .iter()
            .find(|c| c.chain == name)
            .ok_or_else(|| Error::InvalidConfig {
                field: "baseline".into(),
                reason: format!("no chain named {name} among the inputs"),
            })?;
        let tau_baseline = base.iact_loglik.ok_or_else(|| Error::InvalidConfig {
            field: "baseline".into(),
            reason: "baseline chain too short for an autocorrelation time".into(),
        })?;
        let t_exact_s = timing
            .t_exact_s
            .or(base.t_exact_s)
            .ok_or_else(|| Error::InvalidConfig {
                field: "baseline".into(),
                reason: "baseline chain logged no exact-map timings".into(),
            })?;
        for chain in &chains {
            if chain.chain == base.chain || chain.t_reduced_s.is_none() {
                continue;
            }
            let (Some(tau_chain), Some(t_reduced_s)) = (
                chain.iact_loglik,
                timing.t_reduced_s.or(chain.t_reduced_s),
            ) else {
                continue;
            };
            speedups.push(SpeedupEntry {
                chain: chain.chain.clone(),
                tau_baseline,
                tau_chain,
                alpha_bar: chain.alpha_bar,
                t_reduced_s,
                t_exact_s,
                speedup: speedup(tau_baseline, tau_chain, chain.alpha_bar, t_reduced_s, t_exact_s)?,
            });
        }
    }
    Ok(Report {
        config_hash,
        burn_in_fraction,
        chains,
        baseline: baseline.map(str::to_string),
        speedups,
    })
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

/// Plot-ready CSV files for one chain: the log-posterior autocorrelation
/// function, a thinned trace, and one histogram per coordinate. Returns
/// `(file name, content)` pairs.
pub fn plot_files(rows: &[StepRow], burn_in_fraction: f64) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    if rows.is_empty() {
        return Ok(files);
    }
    let dim = rows[0].x.len();
    let tail = post_burn_in(rows, burn_in_fraction);

    let log_post_all = carried_log_post(rows, None)?;
    let steps = rows.len() - 1;
    let burn = burn_in_steps(steps as u64, burn_in_fraction) as usize;
    let log_post_tail = &log_post_all[(burn + 1).min(log_post_all.len())..];
    if log_post_tail.len() >= 100 {
        let max_lag = (log_post_tail.len() / 5).min(200);
        if let Ok(rho) = autocorrelations(log_post_tail, max_lag) {
            let mut csv = String::from("lag,autocorrelation\n");
            for (lag, r) in rho.iter().enumerate() {
                csv.push_str(&format!("{lag},{}\n", float(*r)));
            }
            files.push(("autocorrelation.csv".to_string(), csv));
        }
    }

    // Thinned trace, at most 1000 evenly spaced rows over the whole run.
    let stride = (rows.len() / 1000).max(1);
    let mut csv = String::from("step,");
    csv.push_str(
        &(0..dim)
            .map(|i| format!("x{i}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    csv.push('\n');
    for row in rows.iter().step_by(stride) {
        csv.push_str(&row.step.to_string());
        for v in &row.x {
            csv.push(',');
            csv.push_str(&float(*v));
        }
        csv.push('\n');
    }
    files.push(("trace.csv".to_string(), csv));

    for coord in 0..dim {
        let series: Vec<f64> = tail.iter().map(|r| r.x[coord]).collect();
        if series.is_empty() {
            continue;
        }
        let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bins = 40usize;
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut counts = vec![0u64; bins];
        for v in &series {
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        let mut csv = String::from("bin_left,bin_right,count\n");
        for (k, count) in counts.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{count}\n",
                float(lo + k as f64 * width),
                float(lo + (k + 1) as f64 * width)
            ));
        }
        files.push((format!("hist_x{coord}.csv"), csv));
    }
    Ok(files)
}
