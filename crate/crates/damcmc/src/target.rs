//! Posterior densities: the exact target and its reduced-map approximations.
//!
//! All densities are unnormalized log densities. The exact target combines a
//! Gaussian likelihood through the exact forward map with a prior; the
//! approximations substitute the reduced map, optionally corrected by an
//! error model (mean shift, covariance inflation, per-component gain) or by
//! a local additive correction anchored at a reference point.

use std::time::Duration;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::eem::{CorrectionAnchor, EemState};
use crate::error::{Error, Result};
use crate::models::ForwardPair;
use crate::types::{DataVector, ParameterVector};

/// Observation noise: a Gaussian with symmetric positive-definite covariance,
/// factorized once at construction.
pub struct NoiseModel {
    covariance: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl NoiseModel {
    pub fn new(covariance: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&covariance, "noise covariance")?;
        let chol = Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("noise covariance".into()))?;
        Ok(Self { covariance, chol })
    }

    pub fn diagonal(variances: &[f64]) -> Result<Self> {
        if variances.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::NotPositiveDefinite(
                "noise variances must be finite and positive".into(),
            ));
        }
        Self::new(DMatrix::from_diagonal(&DVector::from_row_slice(variances)))
    }

    pub fn isotropic(dim: usize, variance: f64) -> Result<Self> {
        Self::diagonal(&vec![variance; dim])
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// `r^T C^{-1} r` through the cached factorization.
    pub fn quad_form(&self, r: &DVector<f64>) -> f64 {
        let w = self.chol.solve(r);
        r.dot(&w)
    }

    /// Draws one noise realization.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        self.chol.l() * z
    }
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotPositiveDefinite(format!("{what} is not square")));
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::NotPositiveDefinite(format!(
                    "{what} is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Prior over the parameter vector. Log densities are unnormalized and
/// finite on the interior of the support.
#[derive(Clone, Debug)]
pub enum PriorSpec {
    /// Flat density on a box, minus infinity outside.
    UniformBox { bounds: Vec<(f64, f64)> },
    /// Gaussian with the given mean and precision (inverse covariance).
    Gaussian {
        mean: DVector<f64>,
        precision: DMatrix<f64>,
    },
    /// Flat box support with a quadratic smoothness penalty `-x^T P x / 2`
    /// inside it.
    SmoothnessPenalizedBox {
        bounds: Vec<(f64, f64)>,
        precision: DMatrix<f64>,
    },
}

fn check_bounds(bounds: &[(f64, f64)]) -> Result<()> {
    if bounds.is_empty() {
        return Err(Error::InvalidConfig {
            field: "bounds".into(),
            reason: "must not be empty".into(),
        });
    }
    for (i, (lo, hi)) in bounds.iter().enumerate() {
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::InvalidConfig {
                field: format!("bounds[{i}]"),
                reason: format!("need finite lo < hi, got ({lo}, {hi})"),
            });
        }
    }
    Ok(())
}

impl PriorSpec {
    pub fn uniform_box(bounds: Vec<(f64, f64)>) -> Result<Self> {
        check_bounds(&bounds)?;
        Ok(Self::UniformBox { bounds })
    }

    pub fn gaussian(mean: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&precision, "prior precision")?;
        if precision.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                context: "prior precision vs mean",
                expected: mean.len(),
                got: precision.nrows(),
            });
        }
        if Cholesky::new(precision.clone()).is_none() {
            return Err(Error::NotPositiveDefinite("prior precision".into()));
        }
        Ok(Self::Gaussian { mean, precision })
    }

    pub fn smoothness_penalized_box(
        bounds: Vec<(f64, f64)>,
        precision: DMatrix<f64>,
    ) -> Result<Self> {
        check_bounds(&bounds)?;
        check_symmetric(&precision, "penalty precision")?;
        if precision.nrows() != bounds.len() {
            return Err(Error::DimensionMismatch {
                context: "penalty precision vs bounds",
                expected: bounds.len(),
                got: precision.nrows(),
            });
        }
        // positive semidefinite check with a relative jitter
        let d = precision.nrows();
        let jitter = 1e-12 * (precision.trace().abs() / d as f64).max(1e-12);
        let mut shifted = precision.clone();
        for i in 0..d {
            shifted[(i, i)] += jitter;
        }
        if Cholesky::new(shifted).is_none() {
            return Err(Error::NotPositiveDefinite("penalty precision".into()));
        }
        Ok(Self::SmoothnessPenalizedBox { bounds, precision })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::UniformBox { bounds } => bounds.len(),
            Self::Gaussian { mean, .. } => mean.len(),
            Self::SmoothnessPenalizedBox { bounds, .. } => bounds.len(),
        }
    }

    /// Unnormalized log density; minus infinity outside the support.
    pub fn log_density(&self, x: &ParameterVector) -> f64 {
        match self {
            Self::UniformBox { bounds } => {
                if in_box(x, bounds) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Self::Gaussian { mean, precision } => {
                let c = x.as_vector() - mean;
                -0.5 * c.dot(&(precision * &c))
            }
            Self::SmoothnessPenalizedBox { bounds, precision } => {
                if in_box(x, bounds) {
                    let v = x.as_vector();
                    -0.5 * v.dot(&(precision * v))
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// Draws from the prior. The penalized box uses rejection from the flat
    /// box; the penalty must leave enough acceptance mass for that to finish.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Result<ParameterVector> {
        match self {
            Self::UniformBox { bounds } => {
                let v = DVector::from_fn(bounds.len(), |i, _| {
                    rng.gen_range(bounds[i].0..bounds[i].1)
                });
                ParameterVector::from_vector(v)
            }
            Self::Gaussian { mean, precision } => {
                // x = mean + L^{-T} z with precision = L L^T
                let chol = Cholesky::new(precision.clone())
                    .ok_or_else(|| Error::NotPositiveDefinite("prior precision".into()))?;
                let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
                let w = chol
                    .l()
                    .transpose()
                    .solve_upper_triangular(&z)
                    .ok_or_else(|| Error::NotPositiveDefinite("prior precision factor".into()))?;
                ParameterVector::from_vector(mean + w)
            }
            Self::SmoothnessPenalizedBox { bounds, precision } => {
                // The penalty is <= 0 on the box when P is PSD, so
                // exp(penalty) <= 1 bounds the acceptance ratio.
                const MAX_ATTEMPTS: usize = 100_000;
                for _ in 0..MAX_ATTEMPTS {
                    let v = DVector::from_fn(bounds.len(), |i, _| {
                        rng.gen_range(bounds[i].0..bounds[i].1)
                    });
                    let penalty = -0.5 * v.dot(&(precision * &v));
                    if rng.gen::<f64>().ln() < penalty {
                        return ParameterVector::from_vector(v);
                    }
                }
                Err(Error::Solver(format!(
                    "penalized-box prior rejection sampler exceeded {MAX_ATTEMPTS} attempts"
                )))
            }
        }
    }
}

fn in_box(x: &ParameterVector, bounds: &[(f64, f64)]) -> bool {
    x.dim() == bounds.len()
        && x.as_slice()
            .iter()
            .zip(bounds)
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
}

/// Which reduced-map approximation a two-stage sampler screens with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproxKind {
    /// Plain substitution: reduced map with the observation noise covariance.
    Approx1,
    /// Reduced map plus error-model mean, covariance inflated by the error
    /// covariance, optional per-component gain.
    Approx2,
    /// Reduced map shifted by a local additive correction at the anchor,
    /// observation noise covariance.
    Approx3,
    /// Locally corrected map with zero-mean error model and inflated
    /// covariance.
    Approx4,
}

impl ApproxKind {
    pub fn is_state_dependent(self) -> bool {
        matches!(self, ApproxKind::Approx3 | ApproxKind::Approx4)
    }
}

/// Where the error-model moments come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EemSource {
    None,
    PriorFitted,
    PosteriorAdaptive,
}

/// A validated approximation choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApproxSpec {
    pub kind: ApproxKind,
    pub eem_source: EemSource,
    pub gain_enabled: bool,
}

impl ApproxSpec {
    pub fn new(kind: ApproxKind, eem_source: EemSource, gain_enabled: bool) -> Result<Self> {
        match kind {
            ApproxKind::Approx1 | ApproxKind::Approx3 => {
                if eem_source != EemSource::None {
                    return Err(Error::InvalidConfig {
                        field: "approx.eem_source".into(),
                        reason: format!("{kind:?} does not use error-model moments"),
                    });
                }
            }
            ApproxKind::Approx2 => {
                if eem_source == EemSource::None {
                    return Err(Error::InvalidConfig {
                        field: "approx.eem_source".into(),
                        reason: "Approx2 needs prior_fitted or posterior_adaptive moments".into(),
                    });
                }
            }
            ApproxKind::Approx4 => {
                if eem_source != EemSource::PosteriorAdaptive {
                    return Err(Error::InvalidConfig {
                        field: "approx.eem_source".into(),
                        reason: "Approx4 uses the zero-mean posterior_adaptive error model".into(),
                    });
                }
            }
        }
        Ok(Self {
            kind,
            eem_source,
            gain_enabled,
        })
    }
}

/// Gaussian log likelihood `-r^T C^{-1} r / 2` of a simulated output against
/// the observed data.
pub fn gaussian_log_likelihood(
    d_sim: &DataVector,
    d_obs: &DataVector,
    noise: &NoiseModel,
) -> Result<f64> {
    if d_sim.len() != d_obs.len() {
        return Err(Error::DimensionMismatch {
            context: "simulated vs observed data length",
            expected: d_obs.len(),
            got: d_sim.len(),
        });
    }
    if d_obs.len() != noise.dim() {
        return Err(Error::DimensionMismatch {
            context: "data length vs noise covariance",
            expected: noise.dim(),
            got: d_obs.len(),
        });
    }
    let r = d_sim.as_vector() - d_obs.as_vector();
    Ok(-0.5 * noise.quad_form(&r))
}

/// The exact posterior up to a constant. Out-of-support points short-circuit
/// to minus infinity without touching the forward solver.
pub struct Posterior<'a> {
    pub pair: &'a ForwardPair,
    pub noise: &'a NoiseModel,
    pub prior: &'a PriorSpec,
    pub d_obs: &'a DataVector,
}

/// One exact-density evaluation. The forward output and its timing are
/// absent when the point fell outside the prior support.
pub struct PosteriorEval {
    pub log_density: f64,
    pub f_exact: Option<DataVector>,
    pub t_exact: Option<Duration>,
}

impl<'a> Posterior<'a> {
    pub fn new(
        pair: &'a ForwardPair,
        noise: &'a NoiseModel,
        prior: &'a PriorSpec,
        d_obs: &'a DataVector,
    ) -> Result<Self> {
        if noise.dim() != pair.data_dim() || d_obs.len() != pair.data_dim() {
            return Err(Error::DimensionMismatch {
                context: "data/noise dimension vs model output",
                expected: pair.data_dim(),
                got: d_obs.len().min(noise.dim()),
            });
        }
        if prior.dim() != pair.parameter_dim() {
            return Err(Error::DimensionMismatch {
                context: "prior dimension vs model parameters",
                expected: pair.parameter_dim(),
                got: prior.dim(),
            });
        }
        Ok(Self {
            pair,
            noise,
            prior,
            d_obs,
        })
    }

    pub fn evaluate(&self, x: &ParameterVector) -> Result<PosteriorEval> {
        let lp = self.prior.log_density(x);
        if lp == f64::NEG_INFINITY {
            return Ok(PosteriorEval {
                log_density: f64::NEG_INFINITY,
                f_exact: None,
                t_exact: None,
            });
        }
        let (f, t) = self.pair.evaluate_exact(x)?;
        let ll = gaussian_log_likelihood(&f, self.d_obs, self.noise)?;
        let log_density = ll + lp;
        if log_density.is_nan() {
            return Err(Error::NonFinite(
                "exact log posterior evaluated to NaN".into(),
            ));
        }
        Ok(PosteriorEval {
            log_density,
            f_exact: Some(f),
            t_exact: Some(t),
        })
    }

    /// The log posterior when the exact forward output at `x` is already in
    /// hand.
    pub fn log_density_from_exact(&self, x: &ParameterVector, f_exact: &DataVector) -> Result<f64> {
        let lp = self.prior.log_density(x);
        if lp == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(gaussian_log_likelihood(f_exact, self.d_obs, self.noise)? + lp)
    }
}

/// Unnormalized exact log posterior at `x`.
pub fn log_posterior(
    x: &ParameterVector,
    pair: &ForwardPair,
    noise: &NoiseModel,
    prior: &PriorSpec,
    d_obs: &DataVector,
) -> Result<f64> {
    Ok(Posterior::new(pair, noise, prior, d_obs)?
        .evaluate(x)?
        .log_density)
}

enum EffectiveCov<'a> {
    Noise(&'a NoiseModel),
    Inflated(Cholesky<f64, Dyn>),
}

impl EffectiveCov<'_> {
    fn quad_form(&self, r: &DVector<f64>) -> f64 {
        match self {
            EffectiveCov::Noise(n) => n.quad_form(r),
            EffectiveCov::Inflated(chol) => {
                let w = chol.solve(r);
                r.dot(&w)
            }
        }
    }
}

/// An approximation of the posterior built on the reduced map. Never invokes
/// the exact map. Construct once per error-model revision: the inflated
/// covariance is factorized here.
pub struct ApproxPosterior<'a> {
    pub spec: ApproxSpec,
    pair: &'a ForwardPair,
    prior: &'a PriorSpec,
    d_obs: &'a DataVector,
    gain: Option<DVector<f64>>,
    mu_b: DVector<f64>,
    cov: EffectiveCov<'a>,
}

/// One approximate-density evaluation. The reduced output and timing are
/// absent when the point fell outside the prior support.
pub struct ApproxEval {
    pub log_density: f64,
    pub f_reduced: Option<DataVector>,
    pub t_reduced: Option<Duration>,
}

impl<'a> ApproxPosterior<'a> {
    pub fn new(
        spec: ApproxSpec,
        eem: &EemState,
        pair: &'a ForwardPair,
        noise: &'a NoiseModel,
        prior: &'a PriorSpec,
        d_obs: &'a DataVector,
    ) -> Result<Self> {
        let m = pair.data_dim();
        if eem.data_dim() != m {
            return Err(Error::DimensionMismatch {
                context: "error-model dimension vs model output",
                expected: m,
                got: eem.data_dim(),
            });
        }
        if noise.dim() != m || d_obs.len() != m {
            return Err(Error::DimensionMismatch {
                context: "data/noise dimension vs model output",
                expected: m,
                got: d_obs.len().min(noise.dim()),
            });
        }
        if prior.dim() != pair.parameter_dim() {
            return Err(Error::DimensionMismatch {
                context: "prior dimension vs model parameters",
                expected: pair.parameter_dim(),
                got: prior.dim(),
            });
        }
        let cov = match spec.kind {
            ApproxKind::Approx1 | ApproxKind::Approx3 => EffectiveCov::Noise(noise),
            ApproxKind::Approx2 | ApproxKind::Approx4 => {
                let sigma_b = eem.sigma_b();
                // Tiny relative jitter guards rank-deficient early estimates.
                let jitter = 1e-10 * sigma_b.trace() / m as f64;
                let mut total = noise.covariance() + sigma_b;
                for i in 0..m {
                    total[(i, i)] += jitter;
                }
                let chol = Cholesky::new(total).ok_or_else(|| {
                    Error::NotPositiveDefinite("inflated covariance (noise + error model)".into())
                })?;
                EffectiveCov::Inflated(chol)
            }
        };
        let mu_b = match spec.kind {
            ApproxKind::Approx2 => eem.mu_b().clone(),
            _ => DVector::zeros(m),
        };
        let gain = if spec.gain_enabled {
            Some(eem.gain().clone())
        } else {
            None
        };
        Ok(Self {
            spec,
            pair,
            prior,
            d_obs,
            gain,
            mu_b,
            cov,
        })
    }

    /// Evaluates the approximate density, running the reduced map once for
    /// in-support points.
    pub fn evaluate(
        &self,
        x: &ParameterVector,
        anchor: Option<&CorrectionAnchor>,
    ) -> Result<ApproxEval> {
        let lp = self.prior.log_density(x);
        if lp == f64::NEG_INFINITY {
            return Ok(ApproxEval {
                log_density: f64::NEG_INFINITY,
                f_reduced: None,
                t_reduced: None,
            });
        }
        let (f, t) = self.pair.evaluate_reduced(x)?;
        let log_density = self.log_density_parts(lp, &f, anchor)?;
        Ok(ApproxEval {
            log_density,
            f_reduced: Some(f),
            t_reduced: Some(t),
        })
    }

    /// The approximate density at `x` given an already-computed reduced
    /// output there. No solver calls.
    pub fn log_density_from_reduced(
        &self,
        x: &ParameterVector,
        f_reduced: &DataVector,
        anchor: Option<&CorrectionAnchor>,
    ) -> Result<f64> {
        let lp = self.prior.log_density(x);
        if lp == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        self.log_density_parts(lp, f_reduced, anchor)
    }

    fn log_density_parts(
        &self,
        log_prior: f64,
        f_reduced: &DataVector,
        anchor: Option<&CorrectionAnchor>,
    ) -> Result<f64> {
        let f_tilde = if self.spec.kind.is_state_dependent() {
            let anchor = anchor.ok_or_else(|| Error::InvalidConfig {
                field: "anchor".into(),
                reason: format!("{:?} needs a correction anchor", self.spec.kind),
            })?;
            crate::eem::local_correct(f_reduced, anchor)?
        } else {
            f_reduced.clone()
        };
        let mut sim = f_tilde.into_vector();
        if let Some(gain) = &self.gain {
            sim.component_mul_assign(gain);
        }
        let r = sim + &self.mu_b - self.d_obs.as_vector();
        let value = -0.5 * self.cov.quad_form(&r) + log_prior;
        if value.is_nan() {
            return Err(Error::NonFinite(
                "approximate log posterior evaluated to NaN".into(),
            ));
        }
        Ok(value)
    }
}

/// Unnormalized approximate log posterior at `x`; see [`ApproxPosterior`].
#[allow(clippy::too_many_arguments)]
pub fn approx_log_posterior(
    x: &ParameterVector,
    spec: ApproxSpec,
    eem: &EemState,
    anchor: Option<&CorrectionAnchor>,
    pair: &ForwardPair,
    noise: &NoiseModel,
    prior: &PriorSpec,
    d_obs: &DataVector,
) -> Result<f64> {
    Ok(ApproxPosterior::new(spec, eem, pair, noise, prior, d_obs)?
        .evaluate(x, anchor)?
        .log_density)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::FnModel;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::new(v.to_vec()).unwrap()
    }

    fn dav(v: &[f64]) -> DataVector {
        DataVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn log_likelihood_matches_hand_value() {
        // residual (1, 1) against diag(4, 1): -(1/8 + 1/2) = -0.625
        let noise = NoiseModel::diagonal(&[4.0, 1.0]).unwrap();
        let v = gaussian_log_likelihood(&dav(&[2.0, 3.0]), &dav(&[1.0, 2.0]), &noise).unwrap();
        assert_relative_eq!(v, -0.625, max_relative = 1e-15);
    }

    #[test]
    fn log_likelihood_is_shift_invariant() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let noise = NoiseModel::diagonal(&[0.5, 2.0, 1.3]).unwrap();
        for _ in 0..200 {
            let a: Vec<f64> = (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let s: Vec<f64> = (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let shifted_a: Vec<f64> = a.iter().zip(&s).map(|(x, y)| x + y).collect();
            let shifted_b: Vec<f64> = b.iter().zip(&s).map(|(x, y)| x + y).collect();
            let v0 = gaussian_log_likelihood(&dav(&a), &dav(&b), &noise).unwrap();
            let v1 = gaussian_log_likelihood(&dav(&shifted_a), &dav(&shifted_b), &noise).unwrap();
            assert_relative_eq!(v0, v1, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn log_likelihood_rejects_mismatched_lengths() {
        let noise = NoiseModel::diagonal(&[1.0, 1.0]).unwrap();
        assert!(gaussian_log_likelihood(&dav(&[1.0]), &dav(&[1.0, 2.0]), &noise).is_err());
    }

    #[test]
    fn noise_model_rejects_non_spd() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(NoiseModel::new(m).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(NoiseModel::new(asym).is_err());
    }

    fn identity_pair() -> ForwardPair {
        ForwardPair::new(Arc::new(FnModel::new(
            2,
            2,
            |x| DataVector::new(x.as_slice().to_vec()),
            |x| DataVector::new(vec![x[0] * 1.1, x[1] * 0.9]),
        )))
    }

    #[test]
    fn out_of_support_short_circuits_without_solver_call() {
        let pair = identity_pair();
        let noise = NoiseModel::isotropic(2, 1.0).unwrap();
        let prior = PriorSpec::uniform_box(vec![(-1.0, 1.0), (-1.0, 1.0)]).unwrap();
        let d_obs = dav(&[0.0, 0.0]);
        let lp = log_posterior(&pv(&[2.0, 0.0]), &pair, &noise, &prior, &d_obs).unwrap();
        assert_eq!(lp, f64::NEG_INFINITY);
        assert_eq!(pair.counts().exact, 0);
    }

    #[test]
    fn approximations_never_touch_the_exact_map() {
        let pair = identity_pair();
        let noise = NoiseModel::isotropic(2, 1.0).unwrap();
        let prior = PriorSpec::uniform_box(vec![(-1.0, 1.0), (-1.0, 1.0)]).unwrap();
        let d_obs = dav(&[0.1, -0.2]);
        let eem = EemState::identity(2);
        for kind in [ApproxKind::Approx1, ApproxKind::Approx3] {
            let spec = ApproxSpec::new(kind, EemSource::None, false).unwrap();
            let anchor = CorrectionAnchor::new(pv(&[0.0, 0.0]), dav(&[0.0, 0.0]), dav(&[0.0, 0.0]))
                .unwrap();
            approx_log_posterior(
                &pv(&[0.5, 0.5]),
                spec,
                &eem,
                Some(&anchor),
                &pair,
                &noise,
                &prior,
                &d_obs,
            )
            .unwrap();
        }
        assert_eq!(pair.counts().exact, 0);
        assert!(pair.counts().reduced > 0);
    }

    #[test]
    fn trivial_error_model_reduces_approx2_to_approx1() {
        let pair = identity_pair();
        let noise = NoiseModel::diagonal(&[0.7, 1.4]).unwrap();
        let prior = PriorSpec::uniform_box(vec![(-1.0, 1.0), (-1.0, 1.0)]).unwrap();
        let d_obs = dav(&[0.3, -0.1]);
        let x = pv(&[0.4, -0.6]);

        let eem_trivial =
            EemState::from_moments(DVector::zeros(2), DMatrix::zeros(2, 2), 2).unwrap();
        let a1 = approx_log_posterior(
            &x,
            ApproxSpec::new(ApproxKind::Approx1, EemSource::None, false).unwrap(),
            &EemState::identity(2),
            None,
            &pair,
            &noise,
            &prior,
            &d_obs,
        )
        .unwrap();
        let a2 = approx_log_posterior(
            &x,
            ApproxSpec::new(ApproxKind::Approx2, EemSource::PriorFitted, true).unwrap(),
            &eem_trivial,
            None,
            &pair,
            &noise,
            &prior,
            &d_obs,
        )
        .unwrap();
        assert_relative_eq!(a1, a2, max_relative = 1e-12);
    }

    #[test]
    fn corrected_map_matches_exact_density_at_the_anchor() {
        let pair = identity_pair();
        let noise = NoiseModel::diagonal(&[0.7, 1.4]).unwrap();
        let prior = PriorSpec::uniform_box(vec![(-1.0, 1.0), (-1.0, 1.0)]).unwrap();
        let d_obs = dav(&[0.3, -0.1]);
        let x = pv(&[0.4, -0.6]);

        let (f_exact, _) = pair.evaluate_exact(&x).unwrap();
        let (f_reduced, _) = pair.evaluate_reduced(&x).unwrap();
        let anchor = CorrectionAnchor::new(x.clone(), f_exact, f_reduced).unwrap();

        let exact = log_posterior(&x, &pair, &noise, &prior, &d_obs).unwrap();
        let a3 = approx_log_posterior(
            &x,
            ApproxSpec::new(ApproxKind::Approx3, EemSource::None, false).unwrap(),
            &EemState::identity(2),
            Some(&anchor),
            &pair,
            &noise,
            &prior,
            &d_obs,
        )
        .unwrap();
        assert_relative_eq!(exact, a3, max_relative = 1e-12);
    }

    #[test]
    fn approx_spec_validation() {
        assert!(ApproxSpec::new(ApproxKind::Approx1, EemSource::PriorFitted, false).is_err());
        assert!(ApproxSpec::new(ApproxKind::Approx2, EemSource::None, false).is_err());
        assert!(ApproxSpec::new(ApproxKind::Approx3, EemSource::PosteriorAdaptive, false).is_err());
        assert!(ApproxSpec::new(ApproxKind::Approx4, EemSource::PriorFitted, false).is_err());
        assert!(ApproxSpec::new(ApproxKind::Approx4, EemSource::PosteriorAdaptive, false).is_ok());
    }

    #[test]
    fn priors_evaluate_and_sample_inside_support() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let boxp = PriorSpec::uniform_box(vec![(0.0, 1.0), (-2.0, 2.0)]).unwrap();
        assert_eq!(boxp.log_density(&pv(&[0.5, 0.0])), 0.0);
        assert_eq!(boxp.log_density(&pv(&[1.5, 0.0])), f64::NEG_INFINITY);
        for _ in 0..50 {
            let s = boxp.sample(&mut rng).unwrap();
            assert!(boxp.log_density(&s).is_finite());
        }

        let pen = PriorSpec::smoothness_penalized_box(
            vec![(-1.0, 1.0), (-1.0, 1.0)],
            DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]),
        )
        .unwrap();
        let v = pen.log_density(&pv(&[0.5, 0.25]));
        // -(2*0.25 - 2*0.125 + 2*0.0625)/2 hand value
        let x0 = 0.5;
        let x1 = 0.25;
        let hand = -0.5 * (2.0 * x0 * x0 - 2.0 * x0 * x1 + 2.0 * x1 * x1);
        assert_relative_eq!(v, hand, max_relative = 1e-15);
        for _ in 0..50 {
            let s = pen.sample(&mut rng).unwrap();
            assert!(pen.log_density(&s).is_finite());
        }

        let gauss = PriorSpec::gaussian(
            DVector::from_row_slice(&[1.0, -1.0]),
            DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]),
        )
        .unwrap();
        // at mean the density peaks at 0
        assert_relative_eq!(gauss.log_density(&pv(&[1.0, -1.0])), 0.0);
        let away = gauss.log_density(&pv(&[2.0, -1.0]));
        assert_relative_eq!(away, -2.0, max_relative = 1e-15);
    }
}
