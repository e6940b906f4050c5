//! Metropolis-Hastings kernels: the plain single-stage sampler, the
//! two-stage kernel that screens proposals with a cheap approximate density
//! before consulting the exact one, and the adaptive variant that also
//! updates the error model and proposal along the run.

pub mod driver;
pub mod proposal;

use std::time::Duration;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::eem::{local_correct, CorrectionAnchor, EemState};
use crate::error::{Error, Result};
use crate::target::{ApproxKind, ApproxPosterior, ApproxSpec, EemSource, Posterior};
use crate::types::{DataVector, ParameterVector};

pub use proposal::{am_propose, ProposalMode, ProposalState};

/// Which kernel drives the chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Mh,
    Da,
    Ada,
}

/// Current chain position with the cached evaluations reuse depends on.
/// `f_reduced` is absent for single-stage runs that never touch the reduced
/// map.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub x: ParameterVector,
    pub log_post_exact: f64,
    pub f_exact: DataVector,
    pub f_reduced: Option<DataVector>,
}

/// What one step did, for the chain log.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub stage1_accepted: bool,
    pub stage2_evaluated: bool,
    pub stage2_accepted: bool,
    pub alpha: f64,
    pub beta: Option<f64>,
    pub t_reduced: Option<Duration>,
    pub t_exact: Option<Duration>,
}

/// Evaluates the exact posterior (and the reduced map when `with_reduced`)
/// at the starting point. Errors if the point is outside the prior support.
pub fn init_chain_state(
    x0: ParameterVector,
    posterior: &Posterior,
    with_reduced: bool,
) -> Result<ChainState> {
    let eval = posterior.evaluate(&x0)?;
    let f_exact = eval.f_exact.ok_or(Error::OutOfSupport)?;
    let f_reduced = if with_reduced {
        Some(posterior.pair.evaluate_reduced(&x0)?.0)
    } else {
        None
    };
    Ok(ChainState {
        x: x0,
        log_post_exact: eval.log_density,
        f_exact,
        f_reduced,
    })
}

/// Log acceptance factor `min{0, log pi(y) - log pi(x)}` for a symmetric
/// proposal.
pub fn log_alpha(log_target_x: f64, log_target_y: f64) -> f64 {
    if log_target_y == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    (log_target_y - log_target_x).min(0.0)
}

/// Log second-stage factor of the two-stage kernel,
/// `min{0, [log pi(y) + log a(y,x)] - [log pi(x) + log a(x,y)]}`.
pub fn log_beta(log_exact_x: f64, log_exact_y: f64, log_alpha_xy: f64, log_alpha_yx: f64) -> f64 {
    ((log_exact_y + log_alpha_yx) - (log_exact_x + log_alpha_xy)).min(0.0)
}

fn draw_increments<R: Rng>(proposal: &ProposalState, group: usize, rng: &mut R) -> Vec<f64> {
    (0..proposal.noise_dim(group))
        .map(|_| rng.sample(StandardNormal))
        .collect()
}

/// One plain Metropolis step; exactly one exact-density evaluation.
pub fn mh_step<R: Rng>(
    state: &mut ChainState,
    posterior: &Posterior,
    proposal: &ProposalState,
    group: usize,
    rng: &mut R,
) -> Result<StepOutcome> {
    let z = draw_increments(proposal, group, rng);
    let u1 = rng.gen();
    mh_step_with(state, posterior, proposal, group, &z, u1)
}

/// [`mh_step`] with the randomness supplied by the caller.
pub fn mh_step_with(
    state: &mut ChainState,
    posterior: &Posterior,
    proposal: &ProposalState,
    group: usize,
    z: &[f64],
    u1: f64,
) -> Result<StepOutcome> {
    if !state.log_post_exact.is_finite() {
        return Err(Error::NonFinite(
            "target must be finite at the current state".into(),
        ));
    }
    let y = proposal.propose_with(&state.x, z, group)?;
    let eval = posterior.evaluate(&y)?;
    let la = log_alpha(state.log_post_exact, eval.log_density);
    let alpha = la.exp();
    let accepted = u1 < alpha;
    if accepted {
        state.x = y;
        state.log_post_exact = eval.log_density;
        state.f_exact = eval
            .f_exact
            .ok_or(Error::OutOfSupport)?;
        state.f_reduced = None;
    }
    Ok(StepOutcome {
        stage1_accepted: accepted,
        stage2_evaluated: false,
        stage2_accepted: false,
        alpha,
        beta: None,
        t_reduced: None,
        t_exact: eval.t_exact,
    })
}

/// A two-stage step's outcome together with the reduced-map error observed
/// at the proposal, available exactly when stage 2 ran.
pub struct StagePayload {
    pub outcome: StepOutcome,
    pub residual: Option<DVector<f64>>,
}

/// One two-stage step with a fixed approximate density; see [`da_step_with`].
pub fn da_step<R: Rng>(
    state: &mut ChainState,
    posterior: &Posterior,
    approx: &ApproxPosterior,
    proposal: &ProposalState,
    group: usize,
    rng: &mut R,
) -> Result<StepOutcome> {
    let z = draw_increments(proposal, group, rng);
    let u1 = rng.gen();
    Ok(da_step_with(state, posterior, approx, proposal, group, &z, u1, rng)?.outcome)
}

/// One two-stage step with caller-supplied stage-1 randomness. Stage 1
/// screens the proposal with the approximate density (one reduced-map call,
/// never an exact one); a stage-1 rejection returns immediately. Promotion
/// runs the exact density once and applies the second-stage correction, with
/// state-dependent approximations re-anchored at the proposal for the
/// reverse factor.
#[allow(clippy::too_many_arguments)]
pub fn da_step_with<R: Rng>(
    state: &mut ChainState,
    posterior: &Posterior,
    approx: &ApproxPosterior,
    proposal: &ProposalState,
    group: usize,
    z: &[f64],
    u1: f64,
    rng: &mut R,
) -> Result<StagePayload> {
    let f_reduced_x = state.f_reduced.clone().ok_or_else(|| Error::InvalidConfig {
        field: "state.f_reduced".into(),
        reason: "two-stage steps need the reduced output cached at the current state".into(),
    })?;
    let state_dependent = approx.spec.kind.is_state_dependent();
    let anchor_x = if state_dependent {
        Some(CorrectionAnchor::new(
            state.x.clone(),
            state.f_exact.clone(),
            f_reduced_x.clone(),
        )?)
    } else {
        None
    };

    let y = proposal.propose_with(&state.x, z, group)?;
    let s_x = approx.log_density_from_reduced(&state.x, &f_reduced_x, anchor_x.as_ref())?;
    let eval_y = approx.evaluate(&y, anchor_x.as_ref())?;
    let la_xy = log_alpha(s_x, eval_y.log_density);
    let alpha = la_xy.exp();

    if u1 >= alpha {
        return Ok(StagePayload {
            outcome: StepOutcome {
                stage1_accepted: false,
                stage2_evaluated: false,
                stage2_accepted: false,
                alpha,
                beta: None,
                t_reduced: eval_y.t_reduced,
                t_exact: None,
            },
            residual: None,
        });
    }
    if la_xy == f64::NEG_INFINITY {
        return Err(Error::NonFinite(
            "a zero-probability proposal was promoted to stage 2".into(),
        ));
    }
    let f_reduced_y = eval_y.f_reduced.ok_or(Error::OutOfSupport)?;

    let exact_y = posterior.evaluate(&y)?;
    let f_exact_y = exact_y.f_exact.ok_or(Error::OutOfSupport)?;

    // Reverse stage-1 factor; state-dependent approximations anchor at the
    // proposal, reusing outputs already in hand.
    let la_yx = if state_dependent {
        let anchor_y =
            CorrectionAnchor::new(y.clone(), f_exact_y.clone(), f_reduced_y.clone())?;
        let s_y_rev = approx.log_density_from_reduced(&y, &f_reduced_y, Some(&anchor_y))?;
        let s_x_rev =
            approx.log_density_from_reduced(&state.x, &f_reduced_x, Some(&anchor_y))?;
        log_alpha(s_y_rev, s_x_rev)
    } else {
        log_alpha(eval_y.log_density, s_x)
    };

    let lb = log_beta(state.log_post_exact, exact_y.log_density, la_xy, la_yx);
    let beta = lb.exp();
    if !beta.is_finite() {
        return Err(Error::NonFinite("second-stage probability is not finite".into()));
    }

    let residual = if state_dependent {
        let anchor = anchor_x.as_ref().expect("anchor exists for state-dependent kinds");
        let corrected = local_correct(&f_reduced_y, anchor)?;
        f_exact_y.as_vector() - corrected.as_vector()
    } else {
        f_exact_y.as_vector() - f_reduced_y.as_vector()
    };

    let u2: f64 = rng.gen();
    let accepted = u2 < beta;
    if accepted {
        state.x = y;
        state.log_post_exact = exact_y.log_density;
        state.f_exact = f_exact_y;
        state.f_reduced = Some(f_reduced_y);
    }
    Ok(StagePayload {
        outcome: StepOutcome {
            stage1_accepted: true,
            stage2_evaluated: true,
            stage2_accepted: accepted,
            alpha,
            beta: Some(beta),
            t_reduced: eval_y.t_reduced,
            t_exact: exact_y.t_exact,
        },
        residual: Some(residual),
    })
}

/// One adaptive two-stage step: performs [`da_step_with`] against the
/// current error model, then absorbs the observed residual (posterior-
/// adaptive sources only) and updates the proposal moments and scale.
pub fn ada_step<R: Rng>(
    state: &mut ChainState,
    spec: ApproxSpec,
    eem: &mut EemState,
    posterior: &Posterior,
    proposal: &mut ProposalState,
    group: usize,
    rng: &mut R,
) -> Result<StepOutcome> {
    let approx = ApproxPosterior::new(
        spec,
        eem,
        posterior.pair,
        posterior.noise,
        posterior.prior,
        posterior.d_obs,
    )?;
    let z = draw_increments(proposal, group, rng);
    let u1 = rng.gen();
    let payload = da_step_with(state, posterior, &approx, proposal, group, &z, u1, rng)?;
    if payload.outcome.stage2_evaluated && spec.eem_source == EemSource::PosteriorAdaptive {
        let b = payload
            .residual
            .as_ref()
            .expect("stage-2 steps carry a residual");
        eem.absorb(b, spec.kind == ApproxKind::Approx4)?;
    }
    proposal.absorb(&state.x)?;
    proposal.steer(group, payload.outcome.stage1_accepted);
    Ok(payload.outcome)
}

/// Companion trajectory that accepts on stage 1 alone, sharing the main
/// chain's randomness. Used to measure what skipping the second stage
/// would do to estimates; never touches the exact map.
#[derive(Clone, Debug)]
pub struct ShadowState {
    pub x: ParameterVector,
    pub f_reduced: DataVector,
}

/// Stage-1-only outcome of a shadow move.
#[derive(Clone, Copy, Debug)]
pub struct ShadowOutcome {
    pub stage1_accepted: bool,
    pub alpha: f64,
}

/// Advances the shadow trajectory with the same increments and uniform the
/// main chain consumed. State-dependent approximations borrow the main
/// chain's anchor, the only one available without exact-map calls.
pub fn shadow_step_with(
    shadow: &mut ShadowState,
    approx: &ApproxPosterior,
    anchor: Option<&CorrectionAnchor>,
    proposal: &ProposalState,
    group: usize,
    z: &[f64],
    u1: f64,
) -> Result<ShadowOutcome> {
    let y = proposal.propose_with(&shadow.x, z, group)?;
    let s_x = approx.log_density_from_reduced(&shadow.x, &shadow.f_reduced, anchor)?;
    let eval_y = approx.evaluate(&y, anchor)?;
    let la = log_alpha(s_x, eval_y.log_density);
    let alpha = la.exp();
    let accepted = u1 < alpha;
    if accepted {
        shadow.x = y;
        shadow.f_reduced = eval_y.f_reduced.ok_or(Error::OutOfSupport)?;
    }
    Ok(ShadowOutcome {
        stage1_accepted: accepted,
        alpha,
    })
}
