//! Linear-Gaussian testbed: exact map `A x`, reduced map `A* x` with a
//! perturbed matrix. The posterior under a Gaussian prior is available in
//! closed form, which makes this pair the ground-truth check for samplers.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::target::NoiseModel;
use crate::types::{DataVector, ParameterVector};

use super::{ForwardModel, Level};

pub struct LinearGaussian {
    a_exact: DMatrix<f64>,
    a_reduced: DMatrix<f64>,
}

impl LinearGaussian {
    pub fn new(a_exact: DMatrix<f64>, a_reduced: DMatrix<f64>) -> Result<Self> {
        if a_exact.shape() != a_reduced.shape() {
            return Err(Error::DimensionMismatch {
                context: "exact vs reduced matrix shape",
                expected: a_exact.nrows(),
                got: a_reduced.nrows(),
            });
        }
        Ok(Self { a_exact, a_reduced })
    }

    /// Deterministic testbed: `A` has standard normal entries drawn from
    /// `seed`, and the reduced matrix is `A` plus `perturbation` times an
    /// independent standard normal matrix drawn from `seed + 1`.
    pub fn seeded(d: usize, m: usize, perturbation: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_exact = DMatrix::from_fn(m, d, |_, _| StandardNormal.sample(&mut rng));
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let noise = DMatrix::from_fn(m, d, |_, _| StandardNormal.sample(&mut rng2));
        let a_reduced = &a_exact + noise * perturbation;
        Self { a_exact, a_reduced }
    }

    pub fn a_exact(&self) -> &DMatrix<f64> {
        &self.a_exact
    }

    pub fn a_reduced(&self) -> &DMatrix<f64> {
        &self.a_reduced
    }

    /// Conjugate posterior mean and covariance for the exact map under a
    /// Gaussian prior: precision `P0 + A^T C^{-1} A`, mean solving
    /// `P_post mu = P0 mu0 + A^T C^{-1} d`.
    pub fn posterior_moments(
        &self,
        prior_mean: &DVector<f64>,
        prior_precision: &DMatrix<f64>,
        noise: &NoiseModel,
        d_obs: &DataVector,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let a = &self.a_exact;
        let d = a.ncols();
        if prior_mean.len() != d || prior_precision.nrows() != d {
            return Err(Error::DimensionMismatch {
                context: "prior moments vs parameter dimension",
                expected: d,
                got: prior_mean.len(),
            });
        }
        // A^T C^{-1} A and A^T C^{-1} d via columnwise solves
        let noise_chol = Cholesky::new(noise.covariance().clone())
            .ok_or_else(|| Error::NotPositiveDefinite("noise covariance".into()))?;
        let cinv_a = noise_chol.solve(a);
        let precision_post = prior_precision + a.transpose() * &cinv_a;
        let rhs = prior_precision * prior_mean + a.transpose() * noise_chol.solve(d_obs.as_vector());
        let post_chol = Cholesky::new(precision_post.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("posterior precision".into()))?;
        let mean = post_chol.solve(&rhs);
        let covariance = post_chol.solve(&DMatrix::identity(d, d));
        Ok((mean, covariance))
    }
}

impl ForwardModel for LinearGaussian {
    fn parameter_dim(&self) -> usize {
        self.a_exact.ncols()
    }

    fn data_dim(&self) -> usize {
        self.a_exact.nrows()
    }

    fn evaluate(&self, x: &ParameterVector, level: Level) -> Result<DataVector> {
        let a = match level {
            Level::Exact => &self.a_exact,
            Level::Reduced => &self.a_reduced,
        };
        if x.dim() != a.ncols() {
            return Err(Error::DimensionMismatch {
                context: "parameter length vs matrix columns",
                expected: a.ncols(),
                got: x.dim(),
            });
        }
        DataVector::from_vector(a * x.as_vector())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ForwardPair;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    #[test]
    fn equal_matrices_make_the_maps_agree() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let model = LinearGaussian::new(a.clone(), a).unwrap();
        let x = ParameterVector::new(vec![0.3, -0.7]).unwrap();
        let fe = model.evaluate(&x, Level::Exact).unwrap();
        let fr = model.evaluate(&x, Level::Reduced).unwrap();
        assert_eq!(fe, fr);
    }

    #[test]
    fn residual_at_basis_vector_is_matrix_column_difference() {
        let model = LinearGaussian::seeded(4, 6, 0.1, 42);
        let pair = ForwardPair::new(Arc::new(LinearGaussian::seeded(4, 6, 0.1, 42)));
        let e1 = ParameterVector::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let sample = crate::eem::residual(&pair, &e1).unwrap();
        let expected = model.a_exact().column(0) - model.a_reduced().column(0);
        for i in 0..6 {
            assert_relative_eq!(sample.b[i], expected[i], max_relative = 1e-14);
        }
    }

    #[test]
    fn conjugate_moments_solve_the_normal_equations() {
        let model = LinearGaussian::seeded(3, 5, 0.0, 7);
        let noise = NoiseModel::isotropic(5, 0.25).unwrap();
        let prior_mean = DVector::from_row_slice(&[0.5, -0.5, 1.0]);
        let prior_precision = DMatrix::identity(3, 3) * 2.0;
        let d_obs = DataVector::new(vec![1.0, 0.0, -1.0, 0.5, 0.25]).unwrap();
        let (mean, cov) = model
            .posterior_moments(&prior_mean, &prior_precision, &noise, &d_obs)
            .unwrap();
        // verify against the defining linear system
        let a = model.a_exact();
        let p_post = &prior_precision + a.transpose() * a / 0.25;
        let rhs = &prior_precision * &prior_mean + a.transpose() * d_obs.as_vector() / 0.25;
        let lhs = &p_post * &mean;
        for i in 0..3 {
            assert_relative_eq!(lhs[i], rhs[i], max_relative = 1e-10);
        }
        let should_be_identity = &p_post * &cov;
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(should_be_identity[(i, j)], expected, epsilon = 1e-10);
            }
        }
    }
}
