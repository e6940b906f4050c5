//! Enhanced error models for the reduced-map discrepancy.
//!
//! The discrepancy between the exact and reduced forward maps is treated as
//! an additive model error `B(x) = F(x) - F*(x)`. Its first two moments can
//! be fitted offline from prior draws or accumulated online from the
//! residuals a two-stage sampler observes, and a per-component gain/offset
//! calibration is available for reduced maps with a systematic linear bias.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ForwardPair;
use crate::target::PriorSpec;
use crate::types::{DataVector, ParameterVector};

/// First two moments of the model error, plus a per-component gain.
///
/// `count` is the number of residuals the moments are based on. Streaming
/// updates come in two flavours: a mean-and-covariance update, and a
/// zero-mean update whose covariance recursion is
/// `S_n = [(n-2) S_{n-1} + b_n b_n^T] / (n-1)`. That recursion is undefined
/// for n < 3, so the first two residuals are buffered (as a raw scatter
/// matrix) and the reported covariance stays zero until the third residual
/// initializes it.
#[derive(Clone, Debug, PartialEq)]
pub struct EemState {
    mu_b: DVector<f64>,
    /// Sum of (centered) outer products; the reported covariance divides by
    /// count - 1 once enough residuals have arrived.
    scatter: DMatrix<f64>,
    gain: DVector<f64>,
    count: u64,
    /// Set by the first streaming update; guards against mixing the two
    /// update flavours on one state.
    zero_mean: Option<bool>,
}

impl EemState {
    /// The do-nothing error model: zero mean, zero covariance, unit gain.
    pub fn identity(data_dim: usize) -> Self {
        Self {
            mu_b: DVector::zeros(data_dim),
            scatter: DMatrix::zeros(data_dim, data_dim),
            gain: DVector::from_element(data_dim, 1.0),
            count: 0,
            zero_mean: None,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.mu_b.len()
    }

    pub fn mu_b(&self) -> &DVector<f64> {
        &self.mu_b
    }

    /// The reported error covariance. Zero until the estimator is defined
    /// (two residuals for the mean-and-covariance flavour, three for the
    /// zero-mean flavour, immediately for fitted states).
    pub fn sigma_b(&self) -> DMatrix<f64> {
        let needed = match self.zero_mean {
            Some(true) => 3,
            _ => 2,
        };
        if self.count < needed {
            DMatrix::zeros(self.data_dim(), self.data_dim())
        } else {
            &self.scatter / (self.count as f64 - 1.0)
        }
    }

    pub fn gain(&self) -> &DVector<f64> {
        &self.gain
    }

    pub fn set_gain(&mut self, gain: DVector<f64>) -> Result<()> {
        if gain.len() != self.data_dim() {
            return Err(Error::DimensionMismatch {
                context: "gain length vs error-model dimension",
                expected: self.data_dim(),
                got: gain.len(),
            });
        }
        if let Some(i) = gain.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gain component {i}")));
        }
        self.gain = gain;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn is_zero_mean(&self) -> Option<bool> {
        self.zero_mean
    }

    /// Builds a fitted state directly from batch moments.
    pub fn from_moments(mu_b: DVector<f64>, sigma_b: DMatrix<f64>, count: u64) -> Result<Self> {
        let m = mu_b.len();
        if sigma_b.nrows() != m || sigma_b.ncols() != m {
            return Err(Error::DimensionMismatch {
                context: "sigma_b shape vs mu_b length",
                expected: m,
                got: sigma_b.nrows(),
            });
        }
        if count < 2 {
            return Err(Error::InsufficientData(
                "fitted error model needs at least 2 residuals".into(),
            ));
        }
        let scatter = &sigma_b * (count as f64 - 1.0);
        Ok(Self {
            mu_b,
            scatter,
            gain: DVector::from_element(m, 1.0),
            count,
            zero_mean: Some(false),
        })
    }

    /// Absorbs one residual into the running moments.
    ///
    /// With `zero_mean` false this is the streaming mean-and-covariance
    /// update; the resulting moments equal the batch sample mean and the
    /// unbiased (n-1) sample covariance of everything absorbed so far. With
    /// `zero_mean` true the mean is pinned at zero and the covariance follows
    /// the zero-mean recursion described on the type.
    pub fn absorb(&mut self, b: &DVector<f64>, zero_mean: bool) -> Result<()> {
        if b.len() != self.data_dim() {
            return Err(Error::DimensionMismatch {
                context: "residual length vs error-model dimension",
                expected: self.data_dim(),
                got: b.len(),
            });
        }
        if let Some(i) = b.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("residual component {i}")));
        }
        match self.zero_mean {
            None => self.zero_mean = Some(zero_mean),
            Some(mode) if mode != zero_mean => {
                return Err(Error::InvalidConfig {
                    field: "zero_mean".into(),
                    reason: "cannot mix zero-mean and mean-and-covariance updates on one state"
                        .into(),
                })
            }
            Some(_) => {}
        }
        self.count += 1;
        let n = self.count as f64;
        if zero_mean {
            // For n >= 3 the scatter update b b^T reproduces the recursion
            // S_n = [(n-2) S_{n-1} + b b^T]/(n-1) with S stored unscaled; for
            // n < 3 it simply buffers the raw outer products.
            self.scatter += b * b.transpose();
        } else {
            let delta = b - &self.mu_b;
            self.mu_b += &delta / n;
            // (n-1)/n * delta delta^T keeps the scatter symmetric and equal
            // to the batch sum of centered outer products.
            self.scatter += (&delta * delta.transpose()) * ((n - 1.0) / n);
        }
        Ok(())
    }
}

/// Serialized form: reported moments plus the raw scatter needed to resume
/// streaming exactly (the reported covariance alone loses the zero-mean
/// bootstrap buffer).
#[derive(Serialize, Deserialize)]
struct EemStateRepr {
    mu_b: Vec<f64>,
    /// Row-major reported covariance.
    sigma_b: Vec<f64>,
    gain: Vec<f64>,
    count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    zero_mean: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scatter: Option<Vec<f64>>,
}

impl Serialize for EemState {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let sigma = self.sigma_b();
        let repr = EemStateRepr {
            mu_b: self.mu_b.iter().copied().collect(),
            sigma_b: row_major(&sigma),
            gain: self.gain.iter().copied().collect(),
            count: self.count,
            zero_mean: self.zero_mean,
            scatter: Some(row_major(&self.scatter)),
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for EemState {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as DeError;
        let repr = EemStateRepr::deserialize(deserializer)?;
        let m = repr.mu_b.len();
        if repr.sigma_b.len() != m * m {
            return Err(D::Error::custom(format!(
                "sigma_b has {} entries, expected {}",
                repr.sigma_b.len(),
                m * m
            )));
        }
        if repr.gain.len() != m {
            return Err(D::Error::custom("gain length does not match mu_b"));
        }
        let scatter = match repr.scatter {
            Some(s) => {
                if s.len() != m * m {
                    return Err(D::Error::custom("scatter shape does not match mu_b"));
                }
                from_row_major(&s, m)
            }
            // Older snapshots carry only the reported covariance; recover the
            // scatter when it is well defined.
            None => from_row_major(&repr.sigma_b, m) * (repr.count.max(2) as f64 - 1.0),
        };
        Ok(EemState {
            mu_b: DVector::from_vec(repr.mu_b),
            scatter,
            gain: DVector::from_vec(repr.gain),
            count: repr.count,
            zero_mean: repr.zero_mean,
        })
    }
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub(crate) fn from_row_major(values: &[f64], m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |i, j| values[i * m + j])
}

/// One observed model-error sample `b = F(x) - F*(x)`.
#[derive(Clone, Debug)]
pub struct ResidualSample {
    pub x: ParameterVector,
    pub b: DVector<f64>,
}

/// The data needed to correct the reduced map around a reference point:
/// both map outputs at that point.
#[derive(Clone, Debug)]
pub struct CorrectionAnchor {
    pub x: ParameterVector,
    pub f_exact: DataVector,
    pub f_reduced: DataVector,
}

impl CorrectionAnchor {
    pub fn new(x: ParameterVector, f_exact: DataVector, f_reduced: DataVector) -> Result<Self> {
        if f_exact.len() != f_reduced.len() {
            return Err(Error::DimensionMismatch {
                context: "anchor exact vs reduced output length",
                expected: f_exact.len(),
                got: f_reduced.len(),
            });
        }
        Ok(Self {
            x,
            f_exact,
            f_reduced,
        })
    }

    /// The additive offset `F(x) - F*(x)` at the anchor point.
    pub fn offset(&self) -> DVector<f64> {
        self.f_exact.as_vector() - self.f_reduced.as_vector()
    }
}

/// Evaluates both maps at `x` and returns the model error there. Costs
/// exactly one evaluation of each map.
pub fn residual(pair: &ForwardPair, x: &ParameterVector) -> Result<ResidualSample> {
    let (f_exact, _) = pair.evaluate_exact(x)?;
    let (f_reduced, _) = pair.evaluate_reduced(x)?;
    Ok(ResidualSample {
        x: x.clone(),
        b: f_exact.as_vector() - f_reduced.as_vector(),
    })
}

/// Shifts a reduced-map output by the anchor's exact-minus-reduced offset.
/// At the anchor point itself this reproduces the exact output identically.
pub fn local_correct(f_reduced: &DataVector, anchor: &CorrectionAnchor) -> Result<DataVector> {
    if f_reduced.len() != anchor.f_exact.len() {
        return Err(Error::DimensionMismatch {
            context: "reduced output length vs anchor",
            expected: anchor.f_exact.len(),
            got: f_reduced.len(),
        });
    }
    DataVector::from_vector(f_reduced.as_vector() + anchor.offset())
}

/// Fits error-model moments from `l` prior draws: sample mean and unbiased
/// (l-1) sample covariance of the residuals. Draws on which either solver
/// fails are skipped (and reported on stderr); more than `10 * l` total
/// attempts is an error.
pub fn fit_prior_eem<R: rand::Rng>(
    pair: &ForwardPair,
    prior: &PriorSpec,
    l: usize,
    rng: &mut R,
) -> Result<EemState> {
    if l < 2 {
        return Err(Error::InsufficientData(format!(
            "prior error-model fit needs at least 2 draws, got {l}"
        )));
    }
    let m = pair.data_dim();
    let mut samples: Vec<DVector<f64>> = Vec::with_capacity(l);
    let mut attempts = 0usize;
    while samples.len() < l {
        if attempts >= 10 * l {
            return Err(Error::Solver(format!(
                "prior error-model fit exceeded {} attempts ({} residuals collected)",
                10 * l,
                samples.len()
            )));
        }
        attempts += 1;
        let x = prior.sample(rng)?;
        match residual(pair, &x) {
            Ok(sample) => samples.push(sample.b),
            Err(err) => eprintln!("fit_prior_eem: skipping draw {attempts}: {err}"),
        }
    }
    let lf = l as f64;
    let mut mu = DVector::zeros(m);
    for b in &samples {
        mu += b;
    }
    mu /= lf;
    let mut sigma = DMatrix::zeros(m, m);
    for b in &samples {
        let c = b - &mu;
        sigma += &c * c.transpose();
    }
    sigma /= lf - 1.0;
    EemState::from_moments(mu, sigma, l as u64)
}

/// Streaming-update form of [`EemState::absorb`] that returns the updated
/// state.
pub fn update_posterior_eem(state: &EemState, b: &DVector<f64>, zero_mean: bool) -> Result<EemState> {
    let mut next = state.clone();
    next.absorb(b, zero_mean)?;
    Ok(next)
}

/// Per-component linear calibration of a reduced map from two reference
/// frames, so that `gain * sim + offset` reproduces both observed frames
/// exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainOffset {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
}

impl GainOffset {
    pub fn apply(&self, sim: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(sim.len(), |k, _| self.gain[k] * sim[k] + self.offset[k])
    }
}

/// Fits the two-point gain/offset calibration componentwise. Errors if any
/// component's simulated spread is too small to divide by.
pub fn fit_gain_offset(
    sim_empty: &DataVector,
    sim_full: &DataVector,
    obs_empty: &DataVector,
    obs_full: &DataVector,
) -> Result<GainOffset> {
    let m = sim_empty.len();
    for (name, v) in [
        ("sim_full", sim_full),
        ("obs_empty", obs_empty),
        ("obs_full", obs_full),
    ] {
        if v.len() != m {
            return Err(Error::DimensionMismatch {
                context: match name {
                    "sim_full" => "sim_full length vs sim_empty",
                    "obs_empty" => "obs_empty length vs sim_empty",
                    _ => "obs_full length vs sim_empty",
                },
                expected: m,
                got: v.len(),
            });
        }
    }
    let mut gain = Vec::with_capacity(m);
    let mut offset = Vec::with_capacity(m);
    for k in 0..m {
        let denom = sim_full[k] - sim_empty[k];
        let scale = sim_full[k].abs() + sim_empty[k].abs();
        if denom == 0.0 || denom.abs() < 1e-14 * scale {
            return Err(Error::DegenerateCalibration { component: k });
        }
        let g = (obs_full[k] - obs_empty[k]) / denom;
        gain.push(g);
        offset.push(obs_empty[k] - g * sim_empty[k]);
    }
    Ok(GainOffset { gain, offset })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn local_correct_matches_hand_value() {
        let anchor = CorrectionAnchor::new(
            ParameterVector::new(vec![0.0]).unwrap(),
            DataVector::new(vec![1.5, 1.5]).unwrap(),
            DataVector::new(vec![1.0, 2.0]).unwrap(),
        )
        .unwrap();
        // offset = (0.5, -0.5), so (1, 2) corrected is (1.5, 1.5)
        let corrected = local_correct(&DataVector::new(vec![1.0, 2.0]).unwrap(), &anchor).unwrap();
        assert_eq!(corrected.as_slice(), &[1.5, 1.5]);
    }

    #[test]
    fn local_correct_is_exact_at_the_anchor() {
        let anchor = CorrectionAnchor::new(
            ParameterVector::new(vec![2.0]).unwrap(),
            DataVector::new(vec![3.0, -1.0, 0.25]).unwrap(),
            DataVector::new(vec![2.5, -2.0, 0.5]).unwrap(),
        )
        .unwrap();
        let corrected = local_correct(&anchor.f_reduced, &anchor).unwrap();
        for (a, b) in corrected.as_slice().iter().zip(anchor.f_exact.as_slice()) {
            assert_relative_eq!(a, b, max_relative = 1e-15);
        }
    }

    #[test]
    fn zero_mean_update_matches_hand_unrolled_recursion() {
        // Residuals (1,0), (0,1), (1,1): the first two are buffered, the
        // third initializes S_3 = sum of outer products / 2, giving
        // [[1, 0.5], [0.5, 1]].
        let mut state = EemState::identity(2);
        state.absorb(&dv(&[1.0, 0.0]), true).unwrap();
        assert_eq!(state.sigma_b(), DMatrix::zeros(2, 2));
        state.absorb(&dv(&[0.0, 1.0]), true).unwrap();
        assert_eq!(state.sigma_b(), DMatrix::zeros(2, 2));
        state.absorb(&dv(&[1.0, 1.0]), true).unwrap();
        let sigma = state.sigma_b();
        assert_relative_eq!(sigma[(0, 0)], 1.0, max_relative = 1e-14);
        assert_relative_eq!(sigma[(0, 1)], 0.5, max_relative = 1e-14);
        assert_relative_eq!(sigma[(1, 0)], 0.5, max_relative = 1e-14);
        assert_relative_eq!(sigma[(1, 1)], 1.0, max_relative = 1e-14);
        assert_eq!(state.mu_b(), &dv(&[0.0, 0.0]));
        assert_eq!(state.count(), 3);
    }

    #[test]
    fn zero_mean_recursion_matches_direct_form_for_later_updates() {
        // After initialization the absorbed scatter must reproduce
        // S_n = [(n-2) S_{n-1} + b b^T]/(n-1) exactly.
        let residuals = [
            dv(&[1.0, 0.0]),
            dv(&[0.0, 1.0]),
            dv(&[1.0, 1.0]),
            dv(&[-2.0, 0.5]),
            dv(&[0.3, -0.7]),
        ];
        let mut state = EemState::identity(2);
        let mut explicit: Option<DMatrix<f64>> = None;
        for (i, b) in residuals.iter().enumerate() {
            let n = (i + 1) as f64;
            state.absorb(b, true).unwrap();
            explicit = match explicit {
                None if i < 2 => None,
                None => {
                    // direct initialization at n = 3
                    let mut s = DMatrix::zeros(2, 2);
                    for r in &residuals[..3] {
                        s += r * r.transpose();
                    }
                    Some(s / 2.0)
                }
                Some(prev) => Some((prev * (n - 2.0) + b * b.transpose()) / (n - 1.0)),
            };
            if let Some(ref e) = explicit {
                let got = state.sigma_b();
                for i in 0..2 {
                    for j in 0..2 {
                        assert_relative_eq!(got[(i, j)], e[(i, j)], max_relative = 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn streaming_mean_covariance_matches_batch() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let m = 4;
        let n = 1000;
        let samples: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0)))
            .collect();

        let mut state = EemState::identity(m);
        for b in &samples {
            state.absorb(b, false).unwrap();
        }

        let mut mu = DVector::zeros(m);
        for b in &samples {
            mu += b;
        }
        mu /= n as f64;
        let mut sigma = DMatrix::zeros(m, m);
        for b in &samples {
            let c = b - &mu;
            sigma += &c * c.transpose();
        }
        sigma /= n as f64 - 1.0;

        let got_sigma = state.sigma_b();
        for i in 0..m {
            assert_relative_eq!(state.mu_b()[i], mu[i], max_relative = 1e-10);
            for j in 0..m {
                assert_relative_eq!(got_sigma[(i, j)], sigma[(i, j)], max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn two_sample_fit_matches_hand_formula() {
        let b1 = dv(&[1.0, 3.0]);
        let b2 = dv(&[-1.0, 1.0]);
        let mut state = EemState::identity(2);
        state.absorb(&b1, false).unwrap();
        state.absorb(&b2, false).unwrap();
        let mu = (&b1 + &b2) / 2.0;
        let sigma = (&b1 - &mu) * (&b1 - &mu).transpose() + (&b2 - &mu) * (&b2 - &mu).transpose();
        assert_relative_eq!(state.mu_b()[0], mu[0], max_relative = 1e-15);
        assert_relative_eq!(state.mu_b()[1], mu[1], max_relative = 1e-15);
        let got = state.sigma_b();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(got[(i, j)], sigma[(i, j)], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn mixing_update_flavours_is_rejected() {
        let mut state = EemState::identity(1);
        state.absorb(&dv(&[1.0]), true).unwrap();
        assert!(state.absorb(&dv(&[1.0]), false).is_err());
    }

    #[test]
    fn state_round_trips_through_json_mid_bootstrap() {
        let mut state = EemState::identity(2);
        state.absorb(&dv(&[1.0, 0.0]), true).unwrap();
        state.absorb(&dv(&[0.0, 1.0]), true).unwrap();
        let json = serde_json::to_string(&state).unwrap();
        let mut restored: EemState = serde_json::from_str(&json).unwrap();
        restored.absorb(&dv(&[1.0, 1.0]), true).unwrap();
        let sigma = restored.sigma_b();
        assert_relative_eq!(sigma[(0, 1)], 0.5, max_relative = 1e-14);
    }

    #[test]
    fn gain_offset_matches_hand_example_and_interpolates() {
        // scalar example: sims (0, 2), observations (1, 5) -> gain 2, offset 1
        let fit = fit_gain_offset(
            &DataVector::new(vec![0.0]).unwrap(),
            &DataVector::new(vec![2.0]).unwrap(),
            &DataVector::new(vec![1.0]).unwrap(),
            &DataVector::new(vec![5.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(fit.gain, vec![2.0]);
        assert_eq!(fit.offset, vec![1.0]);
        assert_relative_eq!(fit.apply(&dv(&[0.0]))[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(fit.apply(&dv(&[2.0]))[0], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn gain_offset_rejects_zero_spread() {
        let err = fit_gain_offset(
            &DataVector::new(vec![1.0, 1.0]).unwrap(),
            &DataVector::new(vec![2.0, 1.0]).unwrap(),
            &DataVector::new(vec![0.0, 0.0]).unwrap(),
            &DataVector::new(vec![1.0, 1.0]).unwrap(),
        )
        .unwrap_err();
        match err {
            Error::DegenerateCalibration { component } => assert_eq!(component, 1),
            other => panic!("unexpected error: {other}"),
        }
    }
}
