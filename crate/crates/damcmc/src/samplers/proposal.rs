//! Adaptive random-walk proposals: the empirical-covariance mixture kernel
//! and a grouped variant that steers per-group scales toward a target
//! acceptance rate.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ParameterVector;

/// Default mixture weight on the fixed floor kernel.
pub const DEFAULT_MIX_EPS: f64 = 0.05;
/// Default stage-1 acceptance rate the grouped kernel steers toward.
pub const DEFAULT_TARGET_ACCEPT: f64 = 0.13;

/// Which adaptation rule drives the kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalMode {
    /// Single full-dimensional update from the empirical-covariance mixture.
    Am,
    /// Cycling per-group updates with acceptance-steered log scales.
    Gcam,
}

/// Adaptive proposal kernel state.
///
/// Empirical moments accumulate over every chain state handed to [`absorb`];
/// draws use the mixture `(1-eps) * (2.38^2/d) * cov + eps * (0.1^2/d) * I`
/// once more than `2d` states have been absorbed, and the floor term alone
/// before that. Grouped mode restricts each draw to one index group, cycled
/// by the driver, and multiplies the group covariance by an adapted scale.
///
/// [`absorb`]: ProposalState::absorb
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(into = "ProposalStateRepr", try_from = "ProposalStateRepr")]
pub struct ProposalState {
    dim: usize,
    mode: ProposalMode,
    groups: Vec<Vec<usize>>,
    log_scales: Vec<f64>,
    target_accept: f64,
    mix_eps: f64,
    scale_main: f64,
    scale_floor: f64,
    emp_mean: DVector<f64>,
    // Unscaled deviation scatter; the empirical covariance is scatter/(n-1).
    scatter: DMatrix<f64>,
    step_count: u64,
    steer_count: u64,
}

impl ProposalState {
    /// Full-dimensional adaptive kernel (one group, no scale steering).
    pub fn am(dim: usize) -> Result<Self> {
        Self::gcam(dim, vec![(0..dim).collect()], DEFAULT_TARGET_ACCEPT).map(|mut s| {
            s.mode = ProposalMode::Am;
            s
        })
    }

    /// Grouped kernel over the given index partition.
    pub fn gcam(dim: usize, groups: Vec<Vec<usize>>, target_accept: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig {
                field: "proposal.dim".into(),
                reason: "dimension must be positive".into(),
            });
        }
        if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
            return Err(Error::InvalidConfig {
                field: "proposal.groups".into(),
                reason: "groups must be nonempty".into(),
            });
        }
        let mut seen: Vec<usize> = groups.iter().flatten().copied().collect();
        seen.sort_unstable();
        if seen != (0..dim).collect::<Vec<_>>() {
            return Err(Error::InvalidConfig {
                field: "proposal.groups".into(),
                reason: format!("groups must partition 0..{dim}"),
            });
        }
        if !(0.0 < target_accept && target_accept < 1.0) {
            return Err(Error::InvalidConfig {
                field: "proposal.target_accept".into(),
                reason: "must lie in (0, 1)".into(),
            });
        }
        let n_groups = groups.len();
        Ok(Self {
            dim,
            mode: ProposalMode::Gcam,
            groups,
            log_scales: vec![0.0; n_groups],
            target_accept,
            mix_eps: DEFAULT_MIX_EPS,
            scale_main: 2.38 * 2.38,
            scale_floor: 0.1 * 0.1,
            emp_mean: DVector::zeros(dim),
            scatter: DMatrix::zeros(dim, dim),
            step_count: 0,
            steer_count: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> ProposalMode {
        self.mode
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn log_scales(&self) -> &[f64] {
        &self.log_scales
    }

    pub fn emp_mean(&self) -> &DVector<f64> {
        &self.emp_mean
    }

    /// Empirical covariance of the absorbed states; zero until two states
    /// are in.
    pub fn emp_cov(&self) -> DMatrix<f64> {
        if self.step_count < 2 {
            DMatrix::zeros(self.dim, self.dim)
        } else {
            &self.scatter / (self.step_count - 1) as f64
        }
    }

    /// Group updated at the given zero-based step index.
    pub fn active_group(&self, step_index: u64) -> usize {
        (step_index % self.groups.len() as u64) as usize
    }

    /// Number of normal increments one draw consumes.
    pub fn noise_dim(&self, group: usize) -> usize {
        self.groups[group].len()
    }

    /// Covariance of the next draw restricted to the group's coordinates.
    pub fn proposal_covariance(&self, group: usize) -> DMatrix<f64> {
        let idx = &self.groups[group];
        let dg = idx.len() as f64;
        let scale = self.log_scales[group].exp();
        let floor = scale * self.mix_eps.max(0.0) * self.scale_floor / dg;
        if self.step_count <= 2 * self.dim as u64 {
            return DMatrix::from_diagonal_element(
                idx.len(),
                idx.len(),
                scale * self.scale_floor / dg,
            );
        }
        let cov = self.emp_cov();
        let mut out = DMatrix::zeros(idx.len(), idx.len());
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                out[(a, b)] = scale * (1.0 - self.mix_eps) * self.scale_main / dg * cov[(i, j)];
            }
            out[(a, a)] += floor;
        }
        out
    }

    /// Deterministic draw from pre-drawn standard-normal increments.
    pub fn propose_with(
        &self,
        x: &ParameterVector,
        z: &[f64],
        group: usize,
    ) -> Result<ParameterVector> {
        let idx = &self.groups[group];
        if x.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "proposal state dimension vs current state",
                expected: self.dim,
                got: x.dim(),
            });
        }
        if z.len() != idx.len() {
            return Err(Error::DimensionMismatch {
                context: "increment length vs group size",
                expected: idx.len(),
                got: z.len(),
            });
        }
        let zv = DVector::from_column_slice(z);
        let cov = self.proposal_covariance(group);
        let step = match Cholesky::new(cov) {
            Some(chol) => chol.l() * &zv,
            None => {
                eprintln!(
                    "proposal covariance factorization failed; using the floor kernel this step"
                );
                let dg = idx.len() as f64;
                let sd = (self.log_scales[group].exp() * self.scale_floor / dg).sqrt();
                zv * sd
            }
        };
        let mut y = x.as_vector().clone();
        for (k, &i) in idx.iter().enumerate() {
            y[i] += step[k];
        }
        ParameterVector::from_vector(y)
    }

    /// Random draw; a non-finite result is resampled once, then errors.
    pub fn propose<R: Rng>(
        &self,
        x: &ParameterVector,
        group: usize,
        rng: &mut R,
    ) -> Result<ParameterVector> {
        let draw = |rng: &mut R| -> Vec<f64> {
            (0..self.noise_dim(group))
                .map(|_| rng.sample(StandardNormal))
                .collect()
        };
        let z = draw(rng);
        match self.propose_with(x, &z, group) {
            Ok(y) => Ok(y),
            Err(Error::NonFinite(_)) => {
                let z = draw(rng);
                self.propose_with(x, &z, group)
            }
            Err(e) => Err(e),
        }
    }

    /// Folds a chain state into the empirical moments.
    pub fn absorb(&mut self, x: &ParameterVector) -> Result<()> {
        if x.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "absorbed state dimension",
                expected: self.dim,
                got: x.dim(),
            });
        }
        self.step_count += 1;
        let n = self.step_count as f64;
        let delta = x.as_vector() - &self.emp_mean;
        self.emp_mean += &delta / n;
        // Increment (n-1)/n * delta delta^T keeps scatter equal to the batch
        // sum of squared deviations.
        self.scatter += (&delta * delta.transpose()) * ((n - 1.0) / n);
        Ok(())
    }

    /// Steers the group's log scale toward the target acceptance rate;
    /// returns the applied log-scale change (zero in plain mode).
    pub fn steer(&mut self, group: usize, accepted: bool) -> f64 {
        if self.mode != ProposalMode::Gcam {
            return 0.0;
        }
        self.steer_count += 1;
        let eta = (self.steer_count as f64).powf(-0.6);
        let delta = eta * ((accepted as u8 as f64) - self.target_accept);
        self.log_scales[group] += delta;
        delta
    }

    pub fn steer_count(&self) -> u64 {
        self.steer_count
    }

    #[cfg(test)]
    pub(crate) fn set_moments_for_test(&mut self, mean: DVector<f64>, cov: DMatrix<f64>, count: u64) {
        self.emp_mean = mean;
        self.scatter = cov * (count - 1) as f64;
        self.step_count = count;
    }

    #[cfg(test)]
    pub(crate) fn set_mix_eps_for_test(&mut self, eps: f64) {
        self.mix_eps = eps;
    }
}

/// Full-dimensional draw from the adaptive mixture kernel.
pub fn am_propose<R: Rng>(
    proposal: &ProposalState,
    x: &ParameterVector,
    rng: &mut R,
) -> Result<ParameterVector> {
    if proposal.n_groups() != 1 {
        return Err(Error::InvalidConfig {
            field: "proposal.groups".into(),
            reason: "full-dimensional draw requires a single group".into(),
        });
    }
    proposal.propose(x, 0, rng)
}

#[derive(Serialize, Deserialize)]
struct ProposalStateRepr {
    dim: usize,
    mode: ProposalMode,
    groups: Vec<Vec<usize>>,
    log_scales: Vec<f64>,
    target_accept: f64,
    mix_eps: f64,
    scale_main: f64,
    scale_floor: f64,
    emp_mean: Vec<f64>,
    scatter: Vec<f64>,
    step_count: u64,
    steer_count: u64,
}

impl From<ProposalState> for ProposalStateRepr {
    fn from(s: ProposalState) -> Self {
        ProposalStateRepr {
            dim: s.dim,
            mode: s.mode,
            groups: s.groups,
            log_scales: s.log_scales,
            target_accept: s.target_accept,
            mix_eps: s.mix_eps,
            scale_main: s.scale_main,
            scale_floor: s.scale_floor,
            emp_mean: s.emp_mean.iter().copied().collect(),
            scatter: crate::eem::row_major(&s.scatter),
            step_count: s.step_count,
            steer_count: s.steer_count,
        }
    }
}

impl TryFrom<ProposalStateRepr> for ProposalState {
    type Error = Error;

    fn try_from(r: ProposalStateRepr) -> Result<Self> {
        let mut s = ProposalState::gcam(r.dim, r.groups, r.target_accept)?;
        s.mode = r.mode;
        if r.log_scales.len() != s.groups.len() {
            return Err(Error::InvalidConfig {
                field: "proposal.log_scales".into(),
                reason: "one scale per group required".into(),
            });
        }
        if r.emp_mean.len() != r.dim || r.scatter.len() != r.dim * r.dim {
            return Err(Error::InvalidConfig {
                field: "proposal.moments".into(),
                reason: "moment sizes inconsistent with dimension".into(),
            });
        }
        s.log_scales = r.log_scales;
        s.mix_eps = r.mix_eps;
        s.scale_main = r.scale_main;
        s.scale_floor = r.scale_floor;
        s.emp_mean = DVector::from_vec(r.emp_mean);
        s.scatter = crate::eem::from_row_major(&r.scatter, r.dim);
        s.step_count = r.step_count;
        s.steer_count = r.steer_count;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn early_draws_use_the_floor_covariance() {
        let p = ProposalState::am(4).unwrap();
        let cov = p.proposal_covariance(0);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 0.0025 } else { 0.0 };
                assert_relative_eq!(cov[(i, j)], want, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn identity_empirical_covariance_gives_the_main_scale() {
        let d = 3;
        let mut p = ProposalState::am(d).unwrap();
        p.set_moments_for_test(DVector::zeros(d), DMatrix::identity(d, d), 100);
        p.set_mix_eps_for_test(1e-9);
        let cov = p.proposal_covariance(0);
        let want = 2.38 * 2.38 / d as f64;
        for i in 0..d {
            for j in 0..d {
                let target = if i == j { want } else { 0.0 };
                assert_relative_eq!(cov[(i, j)], target, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn sample_covariance_matches_the_mixture_formula() {
        let d = 3;
        let mut p = ProposalState::am(d).unwrap();
        let mut cov = DMatrix::identity(d, d);
        cov[(0, 0)] = 1.5;
        cov[(1, 1)] = 0.7;
        cov[(0, 1)] = 0.4;
        cov[(1, 0)] = 0.4;
        p.set_moments_for_test(DVector::zeros(d), cov, 1000);
        let want = p.proposal_covariance(0);

        let x = ParameterVector::new(vec![0.0; d]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut mean = DVector::zeros(d);
        let mut scatter = DMatrix::zeros(d, d);
        for _ in 0..n {
            let y = p.propose(&x, 0, &mut rng).unwrap();
            let dv = y.as_vector().clone();
            mean += &dv;
            scatter += &dv * dv.transpose();
        }
        mean /= n as f64;
        let sample_cov = scatter / n as f64 - &mean * mean.transpose();
        let rel = (&sample_cov - &want).norm() / want.norm();
        assert!(rel < 0.05, "sample covariance off by {rel:.3} in relative Frobenius norm");
    }

    #[test]
    fn absorbed_moments_match_batch_estimates() {
        let d = 4;
        let mut p = ProposalState::am(d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut samples = Vec::new();
        for _ in 0..50 {
            let x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            p.absorb(&ParameterVector::new(x.clone()).unwrap()).unwrap();
            samples.push(DVector::from_vec(x));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<DVector<f64>>() / n;
        let mut cov = DMatrix::zeros(d, d);
        for s in &samples {
            let dv = s - &mean;
            cov += &dv * dv.transpose();
        }
        cov /= n - 1.0;
        assert_relative_eq!(p.emp_mean(), &mean, epsilon = 1e-12);
        assert_relative_eq!(p.emp_cov(), cov, epsilon = 1e-12);
    }

    #[test]
    fn steering_tracks_the_acceptance_direction() {
        let mut p = ProposalState::gcam(2, vec![vec![0], vec![1]], 0.13).unwrap();
        let mut last = 0.0;
        for _ in 0..20 {
            p.steer(0, true);
            assert!(p.log_scales()[0] > last);
            last = p.log_scales()[0];
        }
        let mut p = ProposalState::gcam(2, vec![vec![0], vec![1]], 0.13).unwrap();
        let mut last = 0.0;
        for _ in 0..20 {
            p.steer(1, false);
            assert!(p.log_scales()[1] < last);
            last = p.log_scales()[1];
        }
    }

    #[test]
    fn scale_changes_diminish_with_the_step_count() {
        let mut p = ProposalState::gcam(2, vec![vec![0, 1]], 0.13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 1..=500u64 {
            let delta = p.steer(0, rng.gen_bool(0.3));
            assert!(delta.abs() <= (n as f64).powf(-0.6) + 1e-15);
        }
    }

    #[test]
    fn grouped_draw_only_moves_group_coordinates() {
        let p = ProposalState::gcam(4, vec![vec![0, 2], vec![1, 3]], 0.13).unwrap();
        let x = ParameterVector::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = p.propose_with(&x, &[0.5, -0.5], 1).unwrap();
        assert_eq!(y.as_slice()[0], 1.0);
        assert_eq!(y.as_slice()[2], 3.0);
        assert_ne!(y.as_slice()[1], 2.0);
        assert_ne!(y.as_slice()[3], 4.0);
    }

    #[test]
    fn single_group_mode_reduces_to_the_plain_kernel() {
        let mut am = ProposalState::am(3).unwrap();
        let mut gc = ProposalState::gcam(3, vec![vec![0, 1, 2]], 0.13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let x: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let pv = ParameterVector::new(x).unwrap();
            am.absorb(&pv).unwrap();
            gc.absorb(&pv).unwrap();
        }
        let x = ParameterVector::new(vec![0.1, -0.2, 0.3]).unwrap();
        let z = [0.7, -1.1, 0.4];
        let ya = am.propose_with(&x, &z, 0).unwrap();
        let yg = gc.propose_with(&x, &z, 0).unwrap();
        assert_eq!(ya.as_slice(), yg.as_slice());
    }

    #[test]
    fn rejects_a_bad_partition() {
        assert!(ProposalState::gcam(3, vec![vec![0, 1]], 0.13).is_err());
        assert!(ProposalState::gcam(3, vec![vec![0, 1], vec![1, 2]], 0.13).is_err());
        assert!(ProposalState::gcam(3, vec![vec![0, 1, 2], vec![]], 0.13).is_err());
    }

    #[test]
    fn serialization_round_trips() {
        let mut p = ProposalState::gcam(2, vec![vec![0], vec![1]], 0.2).unwrap();
        p.absorb(&ParameterVector::new(vec![1.0, -1.0]).unwrap()).unwrap();
        p.absorb(&ParameterVector::new(vec![0.5, 0.5]).unwrap()).unwrap();
        p.steer(0, true);
        let json = serde_json::to_string(&p).unwrap();
        let q: ProposalState = serde_json::from_str(&json).unwrap();
        assert_eq!(p.step_count(), q.step_count());
        assert_eq!(p.log_scales(), q.log_scales());
        assert_relative_eq!(p.emp_cov(), q.emp_cov(), epsilon = 1e-15);
    }
}
