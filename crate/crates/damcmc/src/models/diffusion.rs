//! 1D nonlinear diffusion testbed.
//!
//! Heat flow through a medium with log-conductivity expanded in 7 smooth
//! basis functions: `kappa(s) = exp(sum_j x_j phi_j(s))` on the unit
//! interval, with `u(0, t) = 1`, `u(1, t) = 0`, `u(s, 0) = 0`. A cell-
//! centered finite-volume scheme with backward-Euler stepping produces
//! sensor readings at 3 interior positions and 10 observation times. The
//! exact map solves on a fine grid (256 cells by default), the reduced map
//! on a coarse grid (16 cells); the time step shrinks proportionally with
//! the cell width so the coarse-to-fine hierarchy converges.

use crate::error::{Error, Result};
use crate::types::{DataVector, ParameterVector};

use super::{ForwardModel, Level};

pub const N_BASIS: usize = 7;

/// The log-conductivity basis: a constant plus sine/cosine pairs at the
/// first three integer frequencies.
pub fn basis(j: usize, s: f64) -> f64 {
    match j {
        0 => 1.0,
        1 => (std::f64::consts::PI * s).sin(),
        2 => (std::f64::consts::PI * s).cos(),
        3 => (2.0 * std::f64::consts::PI * s).sin(),
        4 => (2.0 * std::f64::consts::PI * s).cos(),
        5 => (3.0 * std::f64::consts::PI * s).sin(),
        6 => (3.0 * std::f64::consts::PI * s).cos(),
        _ => panic!("basis index out of range"),
    }
}

fn conductivity(x: &ParameterVector, s: f64) -> f64 {
    let mut acc = 0.0;
    for j in 0..N_BASIS {
        acc += x[j] * basis(j, s);
    }
    acc.exp()
}

#[derive(Clone, Debug)]
pub struct Diffusion1d {
    pub n_fine: usize,
    pub n_coarse: usize,
    pub sensor_positions: Vec<f64>,
    pub sensor_times: Vec<f64>,
}

impl Default for Diffusion1d {
    fn default() -> Self {
        Self {
            n_fine: 256,
            n_coarse: 16,
            sensor_positions: vec![0.25, 0.5, 0.75],
            sensor_times: (1..=10).map(|k| k as f64 * 0.01).collect(),
        }
    }
}

impl Diffusion1d {
    pub fn new(n_fine: usize, n_coarse: usize) -> Result<Self> {
        if n_coarse < 4 || n_fine < n_coarse {
            return Err(Error::InvalidConfig {
                field: "model.n_coarse".into(),
                reason: "need 4 <= n_coarse <= n_fine".into(),
            });
        }
        Ok(Self {
            n_fine,
            n_coarse,
            ..Self::default()
        })
    }

    /// Number of backward-Euler steps per observation interval on an
    /// `n_cells` grid. 80 steps on the default fine grid, shrinking
    /// proportionally with the cell count (at least one).
    fn steps_per_interval(n_cells: usize) -> usize {
        (80 * n_cells).div_ceil(256)
    }

    /// Runs the solver on an `n_cells` grid and samples the sensors.
    /// Observation times must be uniformly spaced starting at one interval.
    pub fn solve_on_grid(&self, x: &ParameterVector, n_cells: usize) -> Result<Vec<f64>> {
        if x.dim() != N_BASIS {
            return Err(Error::DimensionMismatch {
                context: "parameter length vs basis size",
                expected: N_BASIS,
                got: x.dim(),
            });
        }
        let h = 1.0 / n_cells as f64;
        // conductivity at cell faces; the boundary faces feed the half-cell
        // Dirichlet fluxes
        let mut k_face = Vec::with_capacity(n_cells + 1);
        for j in 0..=n_cells {
            let k = conductivity(x, j as f64 * h);
            if !k.is_finite() || k <= 0.0 {
                return Err(Error::Solver(format!(
                    "conductivity is {k} at s = {}",
                    j as f64 * h
                )));
            }
            k_face.push(k);
        }

        let interval = self.sensor_times[0];
        let steps = Self::steps_per_interval(n_cells);
        let dt = interval / steps as f64;
        let r = dt / (h * h);

        // backward-Euler tridiagonal system (I + dt L) u = u_prev + dt g
        let mut diag = vec![0.0; n_cells];
        let mut lower = vec![0.0; n_cells]; // lower[i] couples u_i to u_{i-1}
        let mut upper = vec![0.0; n_cells];
        for i in 0..n_cells {
            let (kl, kr) = (k_face[i], k_face[i + 1]);
            let (wl, wr) = (
                if i == 0 { 2.0 * kl } else { kl },
                if i == n_cells - 1 { 2.0 * kr } else { kr },
            );
            diag[i] = 1.0 + r * (wl + wr);
            if i > 0 {
                lower[i] = -r * k_face[i];
            }
            if i < n_cells - 1 {
                upper[i] = -r * k_face[i + 1];
            }
        }
        // left boundary held at 1: constant source into cell 0
        let source0 = dt * 2.0 * k_face[0] / (h * h);

        let mut u = vec![0.0; n_cells];
        let mut rhs = vec![0.0; n_cells];
        let mut out = Vec::with_capacity(self.sensor_positions.len() * self.sensor_times.len());
        let mut readings = vec![Vec::new(); self.sensor_positions.len()];
        for _ in &self.sensor_times {
            for _ in 0..steps {
                rhs.copy_from_slice(&u);
                rhs[0] += source0;
                thomas_solve(&lower, &diag, &upper, &mut rhs)?;
                std::mem::swap(&mut u, &mut rhs);
            }
            for (si, &s) in self.sensor_positions.iter().enumerate() {
                readings[si].push(sample_cell_centers(&u, s));
            }
        }
        for sensor in readings {
            out.extend(sensor);
        }
        Ok(out)
    }
}

/// Linear interpolation of cell-centered values at position `s`.
fn sample_cell_centers(u: &[f64], s: f64) -> f64 {
    let n = u.len();
    let pos = s * n as f64 - 0.5;
    let i0 = (pos.floor().max(0.0) as usize).min(n - 2);
    let w = (pos - i0 as f64).clamp(0.0, 1.0);
    (1.0 - w) * u[i0] + w * u[i0 + 1]
}

/// In-place Thomas algorithm; `rhs` holds the solution on return.
fn thomas_solve(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) -> Result<()> {
    let n = diag.len();
    let mut c_star = vec![0.0; n];
    let mut denom = diag[0];
    if denom.abs() < 1e-300 {
        return Err(Error::Solver("tridiagonal pivot underflow".into()));
    }
    c_star[0] = upper[0] / denom;
    rhs[0] /= denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c_star[i - 1];
        if denom.abs() < 1e-300 {
            return Err(Error::Solver("tridiagonal pivot underflow".into()));
        }
        c_star[i] = upper[i] / denom;
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c_star[i] * rhs[i + 1];
    }
    Ok(())
}

impl ForwardModel for Diffusion1d {
    fn parameter_dim(&self) -> usize {
        N_BASIS
    }

    fn data_dim(&self) -> usize {
        self.sensor_positions.len() * self.sensor_times.len()
    }

    fn evaluate(&self, x: &ParameterVector, level: Level) -> Result<DataVector> {
        let n = match level {
            Level::Exact => self.n_fine,
            Level::Reduced => self.n_coarse,
        };
        DataVector::new(self.solve_on_grid(x, n)?)
    }
}
