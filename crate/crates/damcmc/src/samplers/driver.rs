//! The chain driver: runs a configured kernel for N steps, logs every step,
//! optionally simulates the stage-1-only companion trajectory with coupled
//! randomness, and tracks adaptation magnitudes for the ergodicity checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::eem::{CorrectionAnchor, EemState};
use crate::error::{Error, Result};
use crate::record::{ShadowRow, StepRow};
use crate::samplers::proposal::ProposalState;
use crate::samplers::{
    da_step_with, init_chain_state, mh_step_with, shadow_step_with, ChainState, SamplerKind,
    ShadowState, StagePayload,
};
use crate::target::{ApproxKind, ApproxPosterior, ApproxSpec, EemSource, Posterior};
use crate::types::ParameterVector;

/// Driver-level knobs; model and target construction happen upstream.
#[derive(Clone, Debug)]
pub struct ChainSettings {
    pub sampler: SamplerKind,
    pub spec: Option<ApproxSpec>,
    pub steps: u64,
    /// Adaptation (proposal moments, scales, error model) stops after this
    /// step; `None` adapts to the end.
    pub adaptation_end: Option<u64>,
    /// Simulate the stage-1-only companion trajectory alongside.
    pub shadow: bool,
    /// Keep the reduced-map error vectors of accepted stage-2 transitions.
    pub log_accepted_residuals: bool,
}

/// Running maxima of the adaptation increments, for the diminishing-
/// adaptation checks.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AdaptationTrace {
    /// max over updates of `n * ||sigma_b(n) - sigma_b(n-1)||_F`.
    pub max_n_dsigma: f64,
    /// max squared norm of any deviation folded into the error model.
    pub max_sq_dev: f64,
    /// max over steering events of `|delta log scale| * n^0.6`.
    pub max_scaled_dlogscale: f64,
    pub eem_absorb_count: u64,
    pub last_eem_adapt_step: u64,
    pub last_proposal_adapt_step: u64,
}

/// Everything a finished (or failed) run produced.
pub struct ChainRunOutput {
    pub rows: Vec<StepRow>,
    pub shadow_rows: Option<Vec<ShadowRow>>,
    /// Reduced-map error at each accepted stage-2 transition, in step order.
    pub accepted_residuals: Vec<Vec<f64>>,
    pub trace: AdaptationTrace,
    pub exact_calls: u64,
    pub reduced_calls: u64,
    pub exact_nanos: u64,
    pub reduced_nanos: u64,
    pub stage1_acceptances: u64,
    pub proposal: ProposalState,
    pub eem: EemState,
    pub final_state: ChainState,
    pub rng_word_pos: u128,
    /// A mid-run failure message; rows up to the failure are valid.
    pub failure: Option<String>,
}

fn make_row(n: u64, state: &ChainState, payload: &StagePayload) -> StepRow {
    let o = &payload.outcome;
    StepRow {
        step: n,
        x: state.x.as_slice().to_vec(),
        // Filled exactly when this step ran the exact map; blanks carry
        // forward since the state cannot have moved without one.
        log_post: o.t_exact.is_some().then_some(state.log_post_exact),
        stage1_accepted: Some(o.stage1_accepted),
        stage2_evaluated: Some(o.stage2_evaluated),
        stage2_accepted: Some(o.stage2_accepted),
        alpha: Some(o.alpha),
        beta: o.beta,
        t_reduced_ns: o.t_reduced.map(|d| d.as_nanos() as u64),
        t_exact_ns: o.t_exact.map(|d| d.as_nanos() as u64),
    }
}

/// Runs the configured sampler from `x0`. Deterministic given the RNG seed.
/// Mid-run solver failures stop the loop and are reported in `failure` with
/// all rows up to that point intact.
pub fn run_chain(
    x0: ParameterVector,
    posterior: &Posterior,
    mut eem: EemState,
    mut proposal: ProposalState,
    settings: &ChainSettings,
    rng: &mut ChaCha8Rng,
) -> Result<ChainRunOutput> {
    let two_stage = settings.sampler != SamplerKind::Mh;
    let spec = match (two_stage, settings.spec) {
        (true, Some(spec)) => Some(spec),
        (true, None) => {
            return Err(Error::InvalidConfig {
                field: "approx".into(),
                reason: "two-stage samplers need an approximation spec".into(),
            })
        }
        (false, _) => None,
    };

    let pair = posterior.pair;
    let counts0 = pair.counts();
    let (nanos_exact0, nanos_reduced0) = pair.total_nanos();

    let mut state = init_chain_state(x0, posterior, two_stage)?;
    let mut rows = Vec::with_capacity(settings.steps as usize + 1);
    rows.push(StepRow {
        step: 0,
        x: state.x.as_slice().to_vec(),
        log_post: Some(state.log_post_exact),
        ..StepRow::default()
    });

    let mut approx: Option<ApproxPosterior> = match spec {
        Some(spec) => Some(ApproxPosterior::new(
            spec,
            &eem,
            posterior.pair,
            posterior.noise,
            posterior.prior,
            posterior.d_obs,
        )?),
        None => None,
    };

    let mut shadow = if settings.shadow && two_stage {
        Some(ShadowState {
            x: state.x.clone(),
            f_reduced: state
                .f_reduced
                .clone()
                .expect("two-stage init caches the reduced output"),
        })
    } else {
        None
    };
    let mut shadow_rows = shadow.as_ref().map(|s| {
        vec![ShadowRow {
            step: 0,
            x: s.x.as_slice().to_vec(),
            ..ShadowRow::default()
        }]
    });

    let mut trace = AdaptationTrace::default();
    let mut accepted_residuals = Vec::new();
    let mut stage1_acceptances = 0u64;
    let mut failure = None;

    let state_dependent = spec.map(|s| s.kind.is_state_dependent()).unwrap_or(false);
    let adapt_eem = settings.sampler == SamplerKind::Ada
        && spec.map(|s| s.eem_source == EemSource::PosteriorAdaptive) == Some(true);

    'steps: for n in 1..=settings.steps {
        let group = proposal.active_group(n - 1);
        let z: Vec<f64> = (0..proposal.noise_dim(group))
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let u1: f64 = rng.gen();
        let adapt_on = settings.adaptation_end.is_none_or(|end| n <= end);

        // The companion trajectory anchors where the main chain does, using
        // the pre-step state; exact outputs exist only there.
        let main_anchor = if state_dependent && shadow.is_some() {
            match CorrectionAnchor::new(
                state.x.clone(),
                state.f_exact.clone(),
                state
                    .f_reduced
                    .clone()
                    .expect("two-stage state caches the reduced output"),
            ) {
                Ok(a) => Some(a),
                Err(e) => {
                    failure = Some(e.to_string());
                    break 'steps;
                }
            }
        } else {
            None
        };

        let payload = match settings.sampler {
            SamplerKind::Mh => {
                match mh_step_with(&mut state, posterior, &proposal, group, &z, u1) {
                    Ok(outcome) => StagePayload {
                        outcome,
                        residual: None,
                    },
                    Err(e) => {
                        failure = Some(e.to_string());
                        break 'steps;
                    }
                }
            }
            SamplerKind::Da | SamplerKind::Ada => {
                let approx_ref = approx.as_ref().expect("two-stage runs build the screen");
                match da_step_with(
                    &mut state, posterior, approx_ref, &proposal, group, &z, u1, rng,
                ) {
                    Ok(p) => p,
                    Err(e) => {
                        failure = Some(e.to_string());
                        break 'steps;
                    }
                }
            }
        };
        stage1_acceptances += payload.outcome.stage1_accepted as u64;

        if let (Some(sh), Some(sh_rows)) = (shadow.as_mut(), shadow_rows.as_mut()) {
            let approx_ref = approx.as_ref().expect("two-stage runs build the screen");
            match shadow_step_with(sh, approx_ref, main_anchor.as_ref(), &proposal, group, &z, u1)
            {
                Ok(out) => sh_rows.push(ShadowRow {
                    step: n,
                    x: sh.x.as_slice().to_vec(),
                    stage1_accepted: Some(out.stage1_accepted),
                    alpha: Some(out.alpha),
                }),
                Err(e) => {
                    failure = Some(e.to_string());
                    break 'steps;
                }
            }
        }

        let mut eem_changed = false;
        if adapt_eem && adapt_on && payload.outcome.stage2_evaluated {
            let spec = spec.expect("adaptive error model implies a spec");
            let b = payload
                .residual
                .as_ref()
                .expect("stage-2 steps carry a residual");
            let zero_mean = spec.kind == ApproxKind::Approx4;
            let sigma_before = eem.sigma_b();
            let dev = if zero_mean { b.clone() } else { b - eem.mu_b() };
            if let Err(e) = eem.absorb(b, zero_mean) {
                failure = Some(e.to_string());
                break 'steps;
            }
            let dsigma = (eem.sigma_b() - sigma_before).norm();
            trace.max_n_dsigma = trace.max_n_dsigma.max(dsigma * eem.count() as f64);
            trace.max_sq_dev = trace.max_sq_dev.max(dev.norm_squared());
            trace.eem_absorb_count += 1;
            trace.last_eem_adapt_step = n;
            eem_changed = true;
        }

        if adapt_on {
            if let Err(e) = proposal.absorb(&state.x) {
                failure = Some(e.to_string());
                break 'steps;
            }
            let delta = proposal.steer(group, payload.outcome.stage1_accepted);
            if delta != 0.0 {
                let k = proposal.steer_count() as f64;
                trace.max_scaled_dlogscale =
                    trace.max_scaled_dlogscale.max(delta.abs() * k.powf(0.6));
            }
            trace.last_proposal_adapt_step = n;
        }

        if eem_changed {
            let spec = spec.expect("adaptive error model implies a spec");
            match ApproxPosterior::new(
                spec,
                &eem,
                posterior.pair,
                posterior.noise,
                posterior.prior,
                posterior.d_obs,
            ) {
                Ok(a) => approx = Some(a),
                Err(e) => {
                    failure = Some(e.to_string());
                    break 'steps;
                }
            }
        }

        if settings.log_accepted_residuals && payload.outcome.stage2_accepted {
            if let Some(b) = &payload.residual {
                accepted_residuals.push(b.iter().copied().collect());
            }
        }

        rows.push(make_row(n, &state, &payload));
    }

    let counts = pair.counts();
    let (nanos_exact, nanos_reduced) = pair.total_nanos();
    Ok(ChainRunOutput {
        rows,
        shadow_rows,
        accepted_residuals,
        trace,
        exact_calls: counts.exact - counts0.exact,
        reduced_calls: counts.reduced - counts0.reduced,
        exact_nanos: nanos_exact - nanos_exact0,
        reduced_nanos: nanos_reduced - nanos_reduced0,
        stage1_acceptances,
        proposal,
        eem,
        final_state: state,
        rng_word_pos: rng.get_word_pos(),
        failure,
    })
}
