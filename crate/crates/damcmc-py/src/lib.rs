//! Python bindings: configured runs, in-memory sampling, the streaming
//! error model, and the autocorrelation and efficiency diagnostics.

use std::path::Path;

use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use damcmc::config::RunConfig;
use damcmc::diagnostics;
use damcmc::eem::EemState;
use damcmc::runner;
use damcmc::Error;

/// Solver breakdowns become RuntimeError; everything else is a usage
/// problem and maps to ValueError.
fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Solver(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_config(config_json: &str) -> PyResult<RunConfig> {
    RunConfig::from_json(config_json).map_err(to_py_err)
}

/// Execute a run from a JSON config string, writing the usual artifact set
/// (config.json, chain.csv, state.json, trace.json, report.json) to
/// `out_dir`. Returns a summary dict.
#[pyfunction]
fn run(py: Python<'_>, config_json: &str, out_dir: &str) -> PyResult<Py<PyDict>> {
    let config = parse_config(config_json)?;
    let summary = runner::execute_run(&config, Path::new(out_dir)).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("out_dir", summary.out_dir.display().to_string())?;
    d.set_item("steps", summary.steps_completed)?;
    d.set_item("chain_hash", summary.chain_hash)?;
    d.set_item("exact_calls", summary.exact_calls)?;
    d.set_item("reduced_calls", summary.reduced_calls)?;
    d.set_item("failure", summary.failure)?;
    Ok(d.into())
}

/// Run a chain in memory and return its trajectory and counters without
/// touching the filesystem. Per-step fields mirror the chain CSV columns;
/// entries are None on steps where the quantity was not evaluated.
#[pyfunction]
fn sample(py: Python<'_>, config_json: &str) -> PyResult<Py<PyDict>> {
    let config = parse_config(config_json)?;
    let (_, out) = runner::run_configured(&config).map_err(to_py_err)?;
    let rows = &out.rows;
    let d = PyDict::new(py);
    d.set_item("x", rows.iter().map(|r| r.x.clone()).collect::<Vec<_>>())?;
    d.set_item(
        "log_post",
        rows.iter().map(|r| r.log_post).collect::<Vec<_>>(),
    )?;
    d.set_item("alpha", rows.iter().map(|r| r.alpha).collect::<Vec<_>>())?;
    d.set_item("beta", rows.iter().map(|r| r.beta).collect::<Vec<_>>())?;
    d.set_item(
        "stage1_accepted",
        rows.iter().map(|r| r.stage1_accepted).collect::<Vec<_>>(),
    )?;
    d.set_item(
        "stage2_accepted",
        rows.iter().map(|r| r.stage2_accepted).collect::<Vec<_>>(),
    )?;
    d.set_item("exact_calls", out.exact_calls)?;
    d.set_item("reduced_calls", out.reduced_calls)?;
    d.set_item("stage1_acceptances", out.stage1_acceptances)?;
    d.set_item("failure", out.failure.clone())?;
    Ok(d.into())
}

/// Fit the prior-centered error model for a config and write eem.json to
/// `out_dir`. Returns the written path.
#[pyfunction]
fn fit_prior_error_model(config_json: &str, out_dir: &str) -> PyResult<String> {
    let config = parse_config(config_json)?;
    runner::execute_fit_prior_eem(&config, Path::new(out_dir))
        .map(|p| p.display().to_string())
        .map_err(to_py_err)
}

/// Integrated autocorrelation time of a scalar series.
/// Returns (tau, truncation_window, degenerate).
#[pyfunction]
fn iact(series: Vec<f64>) -> PyResult<(f64, usize, bool)> {
    let est = diagnostics::iact(&series).map_err(to_py_err)?;
    Ok((est.tau, est.window, est.degenerate))
}

/// Cost-weighted efficiency ratio of a two-stage chain over a single-stage
/// baseline with the same exact map.
#[pyfunction]
fn speedup(
    tau_single: f64,
    tau_two_stage: f64,
    stage1_rate: f64,
    t_reduced: f64,
    t_exact: f64,
) -> PyResult<f64> {
    diagnostics::speedup(tau_single, tau_two_stage, stage1_rate, t_reduced, t_exact)
        .map_err(to_py_err)
}

/// Streaming Gaussian model of reduced-map error. Absorb residuals one at
/// a time; the mean and covariance match batch formulas exactly.
#[pyclass]
struct ErrorModel {
    inner: EemState,
}

#[pymethods]
impl ErrorModel {
    #[new]
    fn new(data_dim: usize) -> Self {
        Self {
            inner: EemState::identity(data_dim),
        }
    }

    /// Absorb one residual vector. With `zero_mean` the mean is pinned at
    /// zero and only the second moment accumulates.
    #[pyo3(signature = (residual, zero_mean = false))]
    fn absorb(&mut self, residual: Vec<f64>, zero_mean: bool) -> PyResult<()> {
        self.inner
            .absorb(&DVector::from_vec(residual), zero_mean)
            .map_err(to_py_err)
    }

    fn mean(&self) -> Vec<f64> {
        self.inner.mu_b().as_slice().to_vec()
    }

    fn covariance(&self) -> Vec<Vec<f64>> {
        let s = self.inner.sigma_b();
        (0..s.nrows())
            .map(|i| (0..s.ncols()).map(|j| s[(i, j)]).collect())
            .collect()
    }

    #[getter]
    fn count(&self) -> u64 {
        self.inner.count()
    }

    fn __repr__(&self) -> String {
        format!(
            "ErrorModel(dim={}, count={})",
            self.inner.mu_b().len(),
            self.inner.count()
        )
    }
}

#[pymodule]
fn damcmc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ErrorModel>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(fit_prior_error_model, m)?)?;
    m.add_function(wrap_pyfunction!(iact, m)?)?;
    m.add_function(wrap_pyfunction!(speedup, m)?)?;
    Ok(())
}
