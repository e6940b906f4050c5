//! Chain quality measures: integrated autocorrelation time with an adaptive
//! truncation window, effective sample size, acceptance summaries, and the
//! cost-weighted efficiency ratio used to compare samplers.

use crate::error::{Error, Result};
use crate::record::StepRow;

/// Window constant of the adaptive truncation rule: the autocorrelation sum
/// stops at the smallest lag `M >= SOKAL_C * tau_hat(M)`.
pub const SOKAL_C: f64 = 6.0;

/// An integrated autocorrelation time estimate.
#[derive(Clone, Copy, Debug)]
pub struct IactEstimate {
    pub tau: f64,
    /// Truncation lag the adaptive rule settled on.
    pub window: usize,
    /// Set when the estimate is unreliable: zero-variance series, or the
    /// window rule never triggered before running out of lags.
    pub degenerate: bool,
}

/// Normalized autocorrelations `rho_0..rho_max_lag` of the series.
pub fn autocorrelations(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = series.len();
    if n < 2 || max_lag >= n {
        return Err(Error::InvalidConfig {
            field: "series".into(),
            reason: format!("need more than {max_lag} points, got {n}"),
        });
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let c0 = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if c0 == 0.0 || !c0.is_finite() {
        return Err(Error::NonFinite(
            "autocorrelation of a constant or non-finite series".into(),
        ));
    }
    let mut rho = Vec::with_capacity(max_lag + 1);
    rho.push(1.0);
    for m in 1..=max_lag {
        let mut ck = 0.0;
        for t in 0..(n - m) {
            ck += (series[t] - mean) * (series[t + m] - mean);
        }
        rho.push(ck / (n as f64) / c0);
    }
    Ok(rho)
}

/// Integrated autocorrelation time `1 + 2 sum rho_k`, truncated at the
/// smallest lag `M >= SOKAL_C * tau_hat(M)`. Needs at least 100 points.
/// A constant series returns `tau = 1` flagged degenerate.
pub fn iact(series: &[f64]) -> Result<IactEstimate> {
    let n = series.len();
    if n < 100 {
        return Err(Error::InvalidConfig {
            field: "series".into(),
            reason: format!("autocorrelation time needs at least 100 points, got {n}"),
        });
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let c0 = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if !c0.is_finite() {
        return Err(Error::NonFinite("series has non-finite moments".into()));
    }
    if c0 == 0.0 {
        return Ok(IactEstimate {
            tau: 1.0,
            window: 0,
            degenerate: true,
        });
    }
    let mut tau = 1.0;
    for m in 1..n {
        let mut ck = 0.0;
        for t in 0..(n - m) {
            ck += (series[t] - mean) * (series[t + m] - mean);
        }
        tau += 2.0 * ck / (n as f64) / c0;
        if m as f64 >= SOKAL_C * tau {
            return Ok(IactEstimate {
                tau,
                window: m,
                degenerate: false,
            });
        }
    }
    Ok(IactEstimate {
        tau,
        window: n - 1,
        degenerate: true,
    })
}

/// Effective sample size `n / tau`. Estimates below one sample per step are
/// noise, so `tau` is clamped to one with a warning.
pub fn ess(n: usize, tau: f64) -> f64 {
    let tau = if tau < 1.0 {
        eprintln!("autocorrelation time {tau:.3} below 1; clamping for the effective sample size");
        1.0
    } else {
        tau
    };
    n as f64 / tau
}

/// A chain estimate of a scalar posterior expectation with its
/// autocorrelation-corrected standard error.
#[derive(Clone, Copy, Debug)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
    pub tau: f64,
}

/// Mean and corrected standard error `sqrt(var * tau / n)` of a chain series.
pub fn mc_estimate(series: &[f64]) -> Result<McEstimate> {
    let est = iact(series)?;
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let tau = est.tau.max(1.0);
    Ok(McEstimate {
        mean,
        se: (var * tau / n as f64).sqrt(),
        n,
        tau,
    })
}

/// Two chain estimates of the same expectation, with the gap between them
/// and its combined standard error.
#[derive(Clone, Copy, Debug)]
pub struct EstimateGap {
    pub a: McEstimate,
    pub b: McEstimate,
    pub gap: f64,
    pub combined_se: f64,
}

/// Compares the estimates two series give for the same scalar expectation.
pub fn compare_estimates(a: &[f64], b: &[f64]) -> Result<EstimateGap> {
    let ea = mc_estimate(a)?;
    let eb = mc_estimate(b)?;
    Ok(EstimateGap {
        a: ea,
        b: eb,
        gap: ea.mean - eb.mean,
        combined_se: (ea.se.powi(2) + eb.se.powi(2)).sqrt(),
    })
}

/// Acceptance behaviour of a logged chain.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AcceptanceSummary {
    /// Steps with a logged outcome (the initial row carries none).
    pub steps: u64,
    /// Fraction of proposals accepted at the first stage; for two-stage
    /// kernels this is the rate at which the exact map runs.
    pub stage1_rate: f64,
    /// Steps whose proposal was promoted to the exact density.
    pub promotions: u64,
    /// Fraction of promoted proposals the second stage accepted.
    pub stage2_rate: Option<f64>,
    /// Mean of the logged second-stage probabilities.
    pub beta_mean: Option<f64>,
}

/// Summarizes acceptance columns of a chain log; rows without outcomes (the
/// initial row) are skipped.
pub fn acceptance_summary(rows: &[StepRow]) -> AcceptanceSummary {
    let mut steps = 0u64;
    let mut s1 = 0u64;
    let mut promoted = 0u64;
    let mut s2 = 0u64;
    let mut beta_sum = 0.0;
    let mut beta_n = 0u64;
    for row in rows {
        let Some(acc1) = row.stage1_accepted else {
            continue;
        };
        steps += 1;
        s1 += acc1 as u64;
        if row.stage2_evaluated == Some(true) {
            promoted += 1;
            s2 += (row.stage2_accepted == Some(true)) as u64;
        }
        if let Some(beta) = row.beta {
            beta_sum += beta;
            beta_n += 1;
        }
    }
    AcceptanceSummary {
        steps,
        stage1_rate: if steps == 0 { 0.0 } else { s1 as f64 / steps as f64 },
        promotions: promoted,
        stage2_rate: (promoted > 0).then(|| s2 as f64 / promoted as f64),
        beta_mean: (beta_n > 0).then(|| beta_sum / beta_n as f64),
    }
}

/// Cost-weighted efficiency of a two-stage chain against a single-stage
/// baseline: `(tau_single / tau_two_stage) / (stage1_rate + t_reduced /
/// t_exact)`. Above one, the two-stage chain buys more effective samples per
/// unit of work.
pub fn speedup(
    tau_single: f64,
    tau_two_stage: f64,
    stage1_rate: f64,
    t_reduced: f64,
    t_exact: f64,
) -> Result<f64> {
    if !(tau_single > 0.0 && tau_two_stage > 0.0 && t_exact > 0.0 && t_reduced >= 0.0) {
        return Err(Error::InvalidConfig {
            field: "speedup".into(),
            reason: "autocorrelation times and the exact-map cost must be positive".into(),
        });
    }
    if !(0.0..=1.0).contains(&stage1_rate) {
        return Err(Error::InvalidConfig {
            field: "speedup.stage1_rate".into(),
            reason: "must lie in [0, 1]".into(),
        });
    }
    let denom = stage1_rate + t_reduced / t_exact;
    if denom <= 0.0 {
        return Err(Error::InvalidConfig {
            field: "speedup".into(),
            reason: "zero acceptance with a free reduced map has no finite ratio".into(),
        });
    }
    Ok(tau_single / tau_two_stage / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ar1(phi: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Start at the stationary distribution.
        let mut x = rng.sample::<f64, _>(StandardNormal) / (1.0 - phi * phi).sqrt();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            x = phi * x + rng.sample::<f64, _>(StandardNormal);
            out.push(x);
        }
        out
    }

    #[test]
    fn ar1_autocorrelation_time_matches_theory() {
        // tau = (1 + phi) / (1 - phi).
        for (phi, seed) in [(0.0, 1u64), (0.5, 2), (0.9, 3)] {
            let series = ar1(phi, 1_000_000, seed);
            let est = iact(&series).unwrap();
            let want = (1.0 + phi) / (1.0 - phi);
            assert!(!est.degenerate);
            assert!(
                (est.tau - want).abs() < 0.15 * want,
                "phi={phi}: tau {:.3} vs theory {want:.3}",
                est.tau
            );
        }
    }

    #[test]
    fn iid_series_has_unit_autocorrelation_time() {
        let series = ar1(0.0, 1_000_000, 4);
        let est = iact(&series).unwrap();
        assert!((est.tau - 1.0).abs() < 0.1, "tau {:.3}", est.tau);
    }

    #[test]
    fn lag_one_autocorrelation_matches_the_ar_coefficient() {
        let series = ar1(0.7, 200_000, 5);
        let rho = autocorrelations(&series, 3).unwrap();
        assert_eq!(rho[0], 1.0);
        assert!((rho[1] - 0.7).abs() < 0.02, "rho1 {:.3}", rho[1]);
        assert!((rho[2] - 0.49).abs() < 0.02, "rho2 {:.3}", rho[2]);
    }

    #[test]
    fn estimates_stabilize_when_the_series_doubles() {
        let mut rels = Vec::new();
        for seed in 0..20u64 {
            let series = ar1(0.8, 200_000, 100 + seed);
            let full = iact(&series).unwrap().tau;
            let half = iact(&series[..100_000]).unwrap().tau;
            rels.push((full - half).abs() / full);
        }
        rels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = rels[rels.len() / 2];
        assert!(median <= 0.10, "median relative drift {median:.3}");
    }

    #[test]
    fn constant_series_is_flagged_degenerate() {
        let est = iact(&[2.5; 500]).unwrap();
        assert!(est.degenerate);
        assert_eq!(est.tau, 1.0);
        assert!(autocorrelations(&[2.5; 500], 10).is_err());
    }

    #[test]
    fn short_series_are_rejected() {
        assert!(iact(&[1.0; 99]).is_err());
    }

    #[test]
    fn effective_sample_size_frozen_case() {
        assert!((ess(11200, 5.6) - 2000.0).abs() < 1e-9);
        // Sub-unit estimates clamp rather than inflating the count.
        assert_eq!(ess(500, 0.3), 500.0);
    }

    #[test]
    fn effective_sample_size_never_exceeds_the_length() {
        let series = ar1(0.3, 10_000, 9);
        let est = iact(&series).unwrap();
        assert!(ess(series.len(), est.tau) <= series.len() as f64);
    }

    #[test]
    fn speedup_frozen_cases() {
        // tau 169 vs 208 and 153, stage-1 rate 0.13, reduced/exact cost
        // 0.15s / 2.60s.
        let a = speedup(169.0, 208.0, 0.13, 0.15, 2.60).unwrap();
        let b = speedup(169.0, 153.0, 0.13, 0.15, 2.60).unwrap();
        assert!((a - 4.33).abs() < 0.005, "speedup {a:.4}");
        assert!((b - 5.89).abs() < 0.005, "speedup {b:.4}");
        assert!(speedup(0.0, 1.0, 0.5, 1.0, 1.0).is_err());
        assert!(speedup(1.0, 1.0, 1.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn corrected_standard_error_widens_with_correlation() {
        let iid = ar1(0.0, 100_000, 11);
        let corr = ar1(0.9, 100_000, 11);
        let e_iid = mc_estimate(&iid).unwrap();
        let e_corr = mc_estimate(&corr).unwrap();
        // Same innovations: the correlated series has both larger variance
        // and a longer autocorrelation time.
        assert!(e_corr.se > 3.0 * e_iid.se);
        assert!((e_iid.mean).abs() < 4.0 * e_iid.se);
        assert!((e_corr.mean).abs() < 4.0 * e_corr.se);
        // The iid standard error is close to sqrt(1/n).
        let want = (1.0 / 100_000.0f64).sqrt();
        assert!((e_iid.se - want).abs() < 0.1 * want);
    }

    #[test]
    fn equal_series_have_zero_gap() {
        let series = ar1(0.5, 50_000, 13);
        let gap = compare_estimates(&series, &series).unwrap();
        assert_eq!(gap.gap, 0.0);
        assert!(gap.combined_se > 0.0);
    }

    #[test]
    fn acceptance_summary_counts_stages() {
        let mut rows = vec![StepRow {
            step: 0,
            x: vec![0.0],
            log_post: Some(-1.0),
            ..StepRow::default()
        }];
        let outcomes = [
            // (stage1, evaluated, accepted, beta)
            (true, true, true, Some(0.9)),
            (false, false, false, None),
            (true, true, false, Some(0.4)),
            (false, false, false, None),
        ];
        for (i, (s1, ev, s2, beta)) in outcomes.iter().enumerate() {
            rows.push(StepRow {
                step: i as u64 + 1,
                x: vec![0.0],
                log_post: ev.then_some(-1.0),
                stage1_accepted: Some(*s1),
                stage2_evaluated: Some(*ev),
                stage2_accepted: Some(*s2),
                alpha: Some(0.5),
                beta: *beta,
                t_reduced_ns: Some(10),
                t_exact_ns: ev.then_some(100),
            });
        }
        let s = acceptance_summary(&rows);
        assert_eq!(s.steps, 4);
        assert_eq!(s.stage1_rate, 0.5);
        assert_eq!(s.promotions, 2);
        assert_eq!(s.stage2_rate, Some(0.5));
        assert!((s.beta_mean.unwrap() - 0.65).abs() < 1e-15);
        // A pure single-stage log has no second-stage statistics.
        let mh_rows: Vec<StepRow> = rows
            .iter()
            .map(|r| StepRow {
                stage2_evaluated: r.stage1_accepted.map(|_| false),
                stage2_accepted: r.stage1_accepted.map(|_| false),
                beta: None,
                ..r.clone()
            })
            .collect();
        let s = acceptance_summary(&mh_rows);
        assert_eq!(s.promotions, 0);
        assert_eq!(s.stage2_rate, None);
        assert_eq!(s.beta_mean, None);
    }
}
