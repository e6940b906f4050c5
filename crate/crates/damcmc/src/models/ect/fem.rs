//! Piecewise-linear FEM on disk meshes: stiffness assembly, Dirichlet
//! solves, and consistent nodal reactions for flux integration.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

use super::mesh::DiskMesh;

/// Assembles the global stiffness matrix for `-div(eps grad u)` with one
/// permittivity value per element.
pub fn assemble_stiffness(mesh: &DiskMesh, eps: &[f64]) -> Result<DMatrix<f64>> {
    if eps.len() != mesh.n_elements() {
        return Err(Error::DimensionMismatch {
            context: "permittivity values vs element count",
            expected: mesh.n_elements(),
            got: eps.len(),
        });
    }
    let n = mesh.n_nodes();
    let mut a = DMatrix::zeros(n, n);
    for (e, &[i, j, k]) in mesh.elements.iter().enumerate() {
        if !eps[e].is_finite() || eps[e] <= 0.0 {
            return Err(Error::Solver(format!(
                "element {e} has non-positive permittivity {}",
                eps[e]
            )));
        }
        let p = [mesh.nodes[i], mesh.nodes[j], mesh.nodes[k]];
        let two_area = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
            - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        if two_area.abs() < 1e-14 {
            return Err(Error::Mesh(format!("element {e} has zero area")));
        }
        // gradients of the barycentric basis functions
        let b = [
            p[1][1] - p[2][1],
            p[2][1] - p[0][1],
            p[0][1] - p[1][1],
        ];
        let c = [
            p[2][0] - p[1][0],
            p[0][0] - p[2][0],
            p[1][0] - p[0][0],
        ];
        let coeff = eps[e] / (2.0 * two_area.abs());
        let ids = [i, j, k];
        for r in 0..3 {
            for s in 0..3 {
                a[(ids[r], ids[s])] += coeff * (b[r] * b[s] + c[r] * c[s]);
            }
        }
    }
    Ok(a)
}

/// A factorized Dirichlet problem on a fixed node set. The factorization is
/// shared across right-hand sides, so one assembly serves all excitation
/// patterns of a capacitance sweep.
pub struct DirichletSolver {
    stiffness: DMatrix<f64>,
    fixed: Vec<usize>,
    free: Vec<usize>,
    chol: Cholesky<f64, Dyn>,
    /// stiffness restricted to (free rows, fixed columns)
    coupling: DMatrix<f64>,
}

impl DirichletSolver {
    pub fn new(mesh: &DiskMesh, eps: &[f64], fixed: Vec<usize>) -> Result<Self> {
        let stiffness = assemble_stiffness(mesh, eps)?;
        let n = mesh.n_nodes();
        let is_fixed = {
            let mut mask = vec![false; n];
            for &f in &fixed {
                if f >= n {
                    return Err(Error::Mesh(format!("fixed node {f} out of range")));
                }
                mask[f] = true;
            }
            mask
        };
        let free: Vec<usize> = (0..n).filter(|&i| !is_fixed[i]).collect();
        if free.is_empty() {
            return Err(Error::Mesh("all nodes are fixed".into()));
        }
        let a_ff = DMatrix::from_fn(free.len(), free.len(), |r, s| {
            stiffness[(free[r], free[s])]
        });
        let coupling = DMatrix::from_fn(free.len(), fixed.len(), |r, s| {
            stiffness[(free[r], fixed[s])]
        });
        let chol = Cholesky::new(a_ff).ok_or_else(|| {
            Error::NotPositiveDefinite("interior stiffness block".into())
        })?;
        Ok(Self {
            stiffness,
            fixed,
            free,
            chol,
            coupling,
        })
    }

    /// Solves with the given values on the fixed nodes (in the order the
    /// fixed set was passed) and returns the full potential vector.
    pub fn solve(&self, fixed_values: &[f64]) -> Result<DVector<f64>> {
        if fixed_values.len() != self.fixed.len() {
            return Err(Error::DimensionMismatch {
                context: "fixed values vs fixed node count",
                expected: self.fixed.len(),
                got: fixed_values.len(),
            });
        }
        let g = DVector::from_row_slice(fixed_values);
        let rhs = -(&self.coupling * &g);
        let u_free = self.chol.solve(&rhs);
        let n = self.stiffness.nrows();
        let mut full = DVector::zeros(n);
        for (r, &i) in self.free.iter().enumerate() {
            full[i] = u_free[r];
        }
        for (s, &i) in self.fixed.iter().enumerate() {
            full[i] = g[s];
        }
        Ok(full)
    }

    /// Nodal reactions `A v`: on fixed nodes these are the consistent
    /// discrete fluxes, on free nodes they vanish to solver precision.
    pub fn reactions(&self, full_potential: &DVector<f64>) -> DVector<f64> {
        &self.stiffness * full_potential
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ect::mesh::structured_disk;

    /// Fixing one interior ring at 1 and the outer boundary at 0 solves the
    /// annulus problem, whose radial solution is ln(1/r) / ln(1/r_in).
    #[test]
    fn annulus_potentials_match_the_radial_solution() {
        let mesh = structured_disk(32, 10, 8).unwrap();
        let eps = vec![1.0; mesh.n_elements()];
        let r_in = 0.5;
        let inner: Vec<usize> = nodes_at_radius(&mesh, r_in);
        let outer: Vec<usize> = nodes_at_radius(&mesh, 1.0);
        assert_eq!(inner.len(), 32);
        assert_eq!(outer.len(), 32);
        let mut fixed = inner.clone();
        fixed.extend(&outer);
        let solver = DirichletSolver::new(&mesh, &eps, fixed).unwrap();
        let mut values = vec![1.0; inner.len()];
        values.extend(vec![0.0; outer.len()]);
        let u = solver.solve(&values).unwrap();

        for radius in [0.6_f64, 0.7, 0.8, 0.9] {
            let expected = (1.0 / radius).ln() / (1.0 / r_in).ln();
            for node in nodes_at_radius(&mesh, radius) {
                let got = u[node];
                let rel = (got - expected).abs() / expected;
                assert!(
                    rel < 0.05,
                    "potential at r = {radius}: got {got:.4}, analytic {expected:.4}"
                );
            }
        }
    }

    fn nodes_at_radius(mesh: &DiskMesh, r: f64) -> Vec<usize> {
        mesh.nodes
            .iter()
            .enumerate()
            .filter(|(_, p)| (p[0].hypot(p[1]) - r).abs() < 1e-9)
            .map(|(i, _)| i)
            .collect()
    }

    #[test]
    fn reactions_vanish_on_free_nodes() {
        let mesh = structured_disk(16, 3, 8).unwrap();
        let eps = vec![2.0; mesh.n_elements()];
        let outer = nodes_at_radius(&mesh, 1.0);
        let mut values = vec![0.0; outer.len()];
        values[0] = 1.0;
        values[1] = 1.0;
        let solver = DirichletSolver::new(&mesh, &eps, outer.clone()).unwrap();
        let u = solver.solve(&values).unwrap();
        let reactions = solver.reactions(&u);
        let outer_set: std::collections::HashSet<usize> = outer.into_iter().collect();
        for i in 0..mesh.n_nodes() {
            if !outer_set.contains(&i) {
                assert!(
                    reactions[i].abs() < 1e-10,
                    "free node {i} has residual reaction {}",
                    reactions[i]
                );
            }
        }
    }
}
