//! Forward models: exact/reduced map pairs with call instrumentation.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::error::Result;
use crate::types::{DataVector, ParameterVector};

pub mod diffusion;
pub mod ect;
pub mod linear_gaussian;

/// Which member of a forward-map pair to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Exact,
    Reduced,
}

/// A parameter-to-data map available at two fidelities. The exact map is the
/// expensive reference solver; the reduced map is the cheap stand-in used to
/// screen proposals. Implementations must be safe for concurrent read-only
/// use.
pub trait ForwardModel: Send + Sync {
    fn parameter_dim(&self) -> usize;
    fn data_dim(&self) -> usize;
    fn evaluate(&self, x: &ParameterVector, level: Level) -> Result<DataVector>;
}

/// Cumulative evaluation counts per fidelity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub exact: u64,
    pub reduced: u64,
}

/// An instrumented forward-map pair. Every evaluation is counted and timed,
/// which lets callers audit how many exact-solver calls a sampling run spent
/// and measure the per-call cost ratio between the two fidelities.
pub struct ForwardPair {
    model: Arc<dyn ForwardModel>,
    exact_calls: AtomicU64,
    reduced_calls: AtomicU64,
    exact_nanos: AtomicU64,
    reduced_nanos: AtomicU64,
}

impl ForwardPair {
    pub fn new(model: Arc<dyn ForwardModel>) -> Self {
        Self {
            model,
            exact_calls: AtomicU64::new(0),
            reduced_calls: AtomicU64::new(0),
            exact_nanos: AtomicU64::new(0),
            reduced_nanos: AtomicU64::new(0),
        }
    }

    pub fn parameter_dim(&self) -> usize {
        self.model.parameter_dim()
    }

    pub fn data_dim(&self) -> usize {
        self.model.data_dim()
    }

    pub fn evaluate_exact(&self, x: &ParameterVector) -> Result<(DataVector, Duration)> {
        let start = Instant::now();
        let out = self.model.evaluate(x, Level::Exact)?;
        let elapsed = start.elapsed();
        self.exact_calls.fetch_add(1, Ordering::Relaxed);
        self.exact_nanos
            .fetch_add(elapsed.as_nanos() as u64, Ordering::Relaxed);
        Ok((out, elapsed))
    }

    pub fn evaluate_reduced(&self, x: &ParameterVector) -> Result<(DataVector, Duration)> {
        let start = Instant::now();
        let out = self.model.evaluate(x, Level::Reduced)?;
        let elapsed = start.elapsed();
        self.reduced_calls.fetch_add(1, Ordering::Relaxed);
        self.reduced_nanos
            .fetch_add(elapsed.as_nanos() as u64, Ordering::Relaxed);
        Ok((out, elapsed))
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            exact: self.exact_calls.load(Ordering::Relaxed),
            reduced: self.reduced_calls.load(Ordering::Relaxed),
        }
    }

    /// Total wall-clock nanoseconds spent in (exact, reduced) evaluations.
    pub fn total_nanos(&self) -> (u64, u64) {
        (
            self.exact_nanos.load(Ordering::Relaxed),
            self.reduced_nanos.load(Ordering::Relaxed),
        )
    }
}

type BoxedMap = Box<dyn Fn(&ParameterVector) -> Result<DataVector> + Send + Sync>;

/// A forward pair built from closures. Intended for tests and for wrapping
/// maps that live outside the built-in testbeds.
pub struct FnModel {
    parameter_dim: usize,
    data_dim: usize,
    exact: BoxedMap,
    reduced: BoxedMap,
}

impl FnModel {
    pub fn new(
        parameter_dim: usize,
        data_dim: usize,
        exact: impl Fn(&ParameterVector) -> Result<DataVector> + Send + Sync + 'static,
        reduced: impl Fn(&ParameterVector) -> Result<DataVector> + Send + Sync + 'static,
    ) -> Self {
        Self {
            parameter_dim,
            data_dim,
            exact: Box::new(exact),
            reduced: Box::new(reduced),
        }
    }
}

impl ForwardModel for FnModel {
    fn parameter_dim(&self) -> usize {
        self.parameter_dim
    }

    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn evaluate(&self, x: &ParameterVector, level: Level) -> Result<DataVector> {
        match level {
            Level::Exact => (self.exact)(x),
            Level::Reduced => (self.reduced)(x),
        }
    }
}
