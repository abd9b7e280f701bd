//! Python module `kac_chaos`.
//!
//! Structured results (fits, diagnostics, reports) come back as plain dicts.

use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use kac_chaos::coupling::{self, CoupledStart};
use kac_chaos::error::KacError;
use kac_chaos::event_stream::RngStream;
use kac_chaos::experiments::{self, Experiment, PartialConfig};
use kac_chaos::flow::{self, FlowModel, InitialLaw, ReferenceFlowConfig};
use kac_chaos::kac_system::{self, Parametrization, SystemState};
use kac_chaos::transport::{self, EmpiricalMeasure};

fn py_err(e: KacError) -> PyErr {
    match e {
        KacError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T>(s: &str) -> PyResult<T>
where
    T: std::str::FromStr<Err = KacError>,
{
    s.parse().map_err(py_err)
}

/// An N-particle Kac system with its own random stream.
#[pyclass(name = "KacSystem", module = "kac_chaos")]
struct PyKacSystem {
    state: SystemState,
    rng: RngStream,
    param: Parametrization,
}

#[pymethods]
impl PyKacSystem {
    #[new]
    #[pyo3(signature = (velocities, seed = 0, stream = 0, parametrization = "polar", time = 0.0))]
    fn new(velocities: Vec<f64>, seed: u64, stream: u64, parametrization: &str, time: f64) -> PyResult<Self> {
        Ok(Self {
            state: SystemState::at_time(velocities, time).map_err(py_err)?,
            rng: RngStream::new(seed, stream),
            param: parse(parametrization)?,
        })
    }

    /// Kac-sphere start with mean energy `energy`.
    #[staticmethod]
    #[pyo3(signature = (n, energy = 1.0, seed = 0, stream = 0, parametrization = "polar"))]
    fn on_sphere(n: usize, energy: f64, seed: u64, stream: u64, parametrization: &str) -> PyResult<Self> {
        let mut rng = RngStream::new(seed, stream);
        let v = kac_system::sample_kac_sphere(n, energy, &mut rng).map_err(py_err)?;
        Ok(Self {
            state: SystemState::new(v).map_err(py_err)?,
            rng,
            param: parse(parametrization)?,
        })
    }

    /// Runs up to `horizon` and returns the number of collisions.
    fn advance(&mut self, py: Python<'_>, horizon: f64) -> PyResult<u64> {
        let Self { state, rng, param } = self;
        py.detach(|| state.advance(horizon, *param, rng)).map_err(py_err)
    }

    #[getter]
    fn velocities(&self) -> Vec<f64> {
        self.state.velocities().to_vec()
    }

    #[getter]
    fn time(&self) -> f64 {
        self.state.time()
    }

    /// Mean energy `(1/N) Σ v²`.
    #[getter]
    fn energy(&self) -> f64 {
        self.state.energy()
    }

    fn __len__(&self) -> usize {
        self.state.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "KacSystem(n={}, time={}, energy={}, parametrization={})",
            self.state.len(),
            self.state.time(),
            self.state.energy(),
            self.param
        )
    }
}

/// Law of the nonlinear process over time: exact for Gaussian `f0`,
/// a large reference system otherwise.
#[pyclass(name = "Flow", module = "kac_chaos", frozen)]
struct PyFlow {
    inner: Arc<FlowModel>,
}

#[pymethods]
impl PyFlow {
    #[staticmethod]
    #[pyo3(signature = (energy = 1.0))]
    fn gaussian(energy: f64) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(flow::stationary_gaussian(energy).map_err(py_err)?),
        })
    }

    /// `f0` as in the CLI: `gaussian:1`, `uniform:-1,1`, `student-like:6`.
    #[staticmethod]
    #[pyo3(signature = (f0, horizon, n_ref = ReferenceFlowConfig::DEFAULT_N_REF, seed = 0))]
    fn from_law(py: Python<'_>, f0: &str, horizon: f64, n_ref: usize, seed: u64) -> PyResult<Self> {
        let law: InitialLaw = parse(f0)?;
        let cfg = ReferenceFlowConfig::covering(horizon, n_ref, seed);
        let model = py.detach(|| flow::flow_for(&law, &cfg)).map_err(py_err)?;
        Ok(Self { inner: Arc::new(model) })
    }

    fn quantile(&self, t: f64, u: f64) -> PyResult<f64> {
        self.inner.quantile(t, u).map_err(py_err)
    }

    fn squared_quantile(&self, t: f64, u: f64) -> PyResult<f64> {
        self.inner.squared_quantile(t, u).map_err(py_err)
    }

    /// `∫ |v|^p f_t(dv)`.
    fn moment(&self, t: f64, p: f64) -> PyResult<f64> {
        self.inner.moment(t, p).map_err(py_err)
    }

    #[getter]
    fn energy(&self) -> f64 {
        self.inner.energy()
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.horizon()
    }

    #[getter]
    fn reference_size(&self) -> Option<usize> {
        self.inner.reference_size()
    }

    fn __repr__(&self) -> String {
        format!(
            "Flow(kind={:?}, energy={}, horizon={})",
            self.inner.kind(),
            self.inner.energy(),
            self.inner.horizon()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (n, energy = 1.0, seed = 0, stream = 0))]
fn sample_kac_sphere(n: usize, energy: f64, seed: u64, stream: u64) -> PyResult<Vec<f64>> {
    kac_system::sample_kac_sphere(n, energy, &mut RngStream::new(seed, stream)).map_err(py_err)
}

/// Exact `W_p` between two empirical measures.
#[pyfunction]
#[pyo3(signature = (xs, ys, p = 2.0))]
fn wasserstein(xs: Vec<f64>, ys: Vec<f64>, p: f64) -> PyResult<f64> {
    let a = EmpiricalMeasure::new(xs).map_err(py_err)?;
    let b = EmpiricalMeasure::new(ys).map_err(py_err)?;
    transport::wasserstein_p(&a, &b, p).map_err(py_err)
}

/// `{gamma, gamma_tilde, lambda_n}` for moment order `p` and size `n`.
#[pyfunction]
fn theoretical_rates(py: Python<'_>, p: f64, n: usize) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &experiments::theoretical_rates(p, n).map_err(py_err)?)
}

#[pyfunction]
fn fit_loglog_slope(py: Python<'_>, xs: Vec<f64>, ys: Vec<f64>) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &experiments::fit_loglog_slope(&xs, &ys).map_err(py_err)?)
}

/// Ensemble of coupled `(V, U)` runs; returns the diagnostics rows.
#[pyfunction]
#[pyo3(signature = (n, flow, obs_times, replicas, seed = 0, start = "shared"))]
fn coupling_diagnostics<'py>(
    py: Python<'py>,
    n: usize,
    flow: &PyFlow,
    obs_times: Vec<f64>,
    replicas: usize,
    seed: u64,
    start: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let start = match start {
        "shared" => CoupledStart::Shared,
        "kac-sphere" => CoupledStart::KacSphere,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown start `{other}` (expected shared|kac-sphere)"
            )))
        }
    };
    let flow = Arc::clone(&flow.inner);
    let diag = py
        .detach(|| {
            coupling::run_coupled_ensemble(n, flow, start, &obs_times, replicas, &RngStream::new(seed, 0))
        })
        .map_err(py_err)?;
    to_py(py, &diag)
}

/// `cov(U_1², U_2²)` at time `t` as `(mean, se)`.
#[pyfunction]
#[pyo3(signature = (n, flow, t, replicas, seed = 0))]
fn estimate_cov_u2(py: Python<'_>, n: usize, flow: &PyFlow, t: f64, replicas: usize, seed: u64) -> PyResult<(f64, f64)> {
    let flow = Arc::clone(&flow.inner);
    let est = py
        .detach(|| coupling::estimate_cov_u2(n, flow, t, replicas, &RngStream::new(seed, 0)))
        .map_err(py_err)?;
    Ok((est.mean, est.se))
}

/// Gap between the first `n` nonlinear processes and their decoupled copies.
#[pyfunction]
#[pyo3(signature = (n, n_particles, flow, t, replicas, seed = 0))]
fn decoupling_gap<'py>(
    py: Python<'py>,
    n: usize,
    n_particles: usize,
    flow: &PyFlow,
    t: f64,
    replicas: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let flow = Arc::clone(&flow.inner);
    let est = py
        .detach(|| coupling::estimate_decoupling_gap(n, n_particles, flow, t, replicas, &RngStream::new(seed, 0)))
        .map_err(py_err)?;
    to_py(py, &est)
}

/// Runs a named experiment. `config` is a JSON object with the same keys as
/// a CLI config file; the returned dict is the full report plus its `csv`.
#[pyfunction]
#[pyo3(signature = (experiment, config = None))]
fn run_experiment<'py>(py: Python<'py>, experiment: &str, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let base = match config {
        Some(text) => PartialConfig::from_json(text).map_err(py_err)?,
        None => PartialConfig::default(),
    };
    let named = PartialConfig {
        experiment: Some(parse::<Experiment>(experiment)?),
        ..PartialConfig::default()
    };
    let cfg = base.overlay(named).resolve().map_err(py_err)?;
    let report = py.detach(|| experiments::run_experiment(&cfg)).map_err(py_err)?;
    let out = to_py(py, &report)?;
    out.set_item("csv", report.table.to_csv_string())?;
    out.set_item("passed", report.all_checks_pass())?;
    Ok(out)
}

#[pymodule(name = "kac_chaos")]
fn kac_chaos_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKacSystem>()?;
    m.add_class::<PyFlow>()?;
    m.add_function(wrap_pyfunction!(sample_kac_sphere, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein, m)?)?;
    m.add_function(wrap_pyfunction!(theoretical_rates, m)?)?;
    m.add_function(wrap_pyfunction!(fit_loglog_slope, m)?)?;
    m.add_function(wrap_pyfunction!(coupling_diagnostics, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_cov_u2, m)?)?;
    m.add_function(wrap_pyfunction!(decoupling_gap, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.name()).collect();
    m.add("EXPERIMENTS", names)?;
    Ok(())
}
