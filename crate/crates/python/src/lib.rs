//! Python bindings for `scts-core`.
//!
//! Matrices cross the boundary as lists of rows; reports come back as dicts
//! or JSON strings.

use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use scts_core::bench::{self, BenchmarkConfig};
use scts_core::inference::{Grid, RerandomizationConfig, Rerandomizer};
use scts_core::policy::{DesignKind, ExperimentResult};
use scts_core::ridge::{BetaMode, BetaSchedule};
use scts_core::SctsError;

create_exception!(scts, SctsDataError, PyException, "Raised on data errors (CLI exit code 3).");

fn to_py(err: SctsError) -> PyErr {
    match err.exit_code() {
        2 => PyValueError::new_err(err.to_string()),
        _ => SctsDataError::new_err(err.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("matrix rows must all have the same length"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn config(toml: Option<&str>) -> PyResult<BenchmarkConfig> {
    match toml {
        Some(text) => BenchmarkConfig::from_toml(text).map_err(to_py),
        None => Ok(BenchmarkConfig::desk_scale()),
    }
}

/// PCA factor estimate of an n x t donor matrix: `(z_hat, singular_values)`.
#[pyfunction]
fn estimate_factors(donors: Vec<Vec<f64>>, r: usize) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let est = scts_core::estimate_factors(&matrix(&donors)?, r);
    Ok((rows(&est.z_hat), est.singular_values.iter().copied().collect()))
}

/// Orthogonal Φ minimizing ‖A − BΦ‖ and the spectral residual.
#[pyfunction]
fn procrustes_align(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, f64)> {
    let (a, b) = (matrix(&a)?, matrix(&b)?);
    if a.shape() != b.shape() {
        return Err(PyValueError::new_err("procrustes_align: shapes differ"));
    }
    let (phi, residual) = scts_core::procrustes_align(&a, &b);
    Ok((rows(&phi), residual))
}

#[pyfunction]
#[pyo3(signature = (y, actions, z_hat, rho = 1.0))]
fn fit_ridge<'py>(
    py: Python<'py>,
    y: Vec<f64>,
    actions: Vec<u8>,
    z_hat: Vec<Vec<f64>>,
    rho: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let z = matrix(&z_hat)?;
    let fit = scts_core::fit_ridge(&y, &actions, &z, rho).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("tau_hat", fit.tau_hat)?;
    out.set_item("sigma_hat", fit.sigma_hat)?;
    out.set_item("lambda_hat", fit.lambda_hat.iter().copied().collect::<Vec<_>>())?;
    Ok(out)
}

/// β_t of the SCTS sampler; `scale = None` is the theoretical schedule.
#[pyfunction]
#[pyo3(signature = (t, sigma, context_bound, r, n, horizon, lambda_norm_plus_tau, scale = None))]
#[allow(clippy::too_many_arguments)]
fn beta_t(
    t: usize,
    sigma: f64,
    context_bound: f64,
    r: usize,
    n: usize,
    horizon: usize,
    lambda_norm_plus_tau: f64,
    scale: Option<f64>,
) -> f64 {
    BetaSchedule {
        sigma,
        context_bound,
        r,
        n,
        horizon,
        lambda_norm_plus_tau,
        mode: scale.map_or(BetaMode::Theoretical, BetaMode::Scaled),
    }
    .beta_t(t)
}

/// Simplex-constrained synthetic-control weights from an n x T0 donor block.
#[pyfunction]
fn fit_sc_weights(donor_pre: Vec<Vec<f64>>, unit_pre: Vec<f64>) -> PyResult<Vec<f64>> {
    let d = matrix(&donor_pre)?;
    if d.ncols() != unit_pre.len() {
        return Err(PyValueError::new_err("unit_pre length must equal donor_pre columns"));
    }
    Ok(scts_core::fit_sc_weights(&d, &unit_pre).map_err(to_py)?.w)
}

/// Accepted grid points and their hull.
type ConfidenceSetTuple = (Vec<f64>, Option<(f64, f64)>);

/// One recorded experiment.
#[pyclass(name = "Experiment", module = "scts")]
struct PyExperiment {
    inner: ExperimentResult,
}

#[pymethods]
impl PyExperiment {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentResult::from_json(text).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[getter]
    fn design(&self) -> &'static str {
        self.inner.design.kind.as_str()
    }

    #[getter]
    fn tau_star(&self) -> Option<f64> {
        self.inner.tau_star
    }

    #[getter]
    fn tau_hat(&self) -> Option<f64> {
        self.inner.final_fit.as_ref().map(|f| f.tau_hat)
    }

    #[getter]
    fn sigma_hat(&self) -> Option<f64> {
        self.inner.final_fit.as_ref().map(|f| f.sigma_hat)
    }

    /// Actions over the treatment epochs.
    #[getter]
    fn actions(&self) -> Vec<u8> {
        self.inner.panel.actions_treatment().to_vec()
    }

    #[getter]
    fn treated_set(&self) -> Vec<usize> {
        self.inner.treated_set.clone()
    }

    #[getter]
    fn normalized_regret(&self) -> Option<f64> {
        self.inner.regret.as_ref().map(|r| r.normalized())
    }

    /// Re-randomization test of H_tau: `(statistic, p_value, rejected)`.
    #[pyo3(signature = (tau, k = 100, alpha = 0.1, seed = 0, two_sided = false))]
    fn test(&self, py: Python<'_>, tau: f64, k: usize, alpha: f64, seed: u64, two_sided: bool) -> PyResult<(f64, f64, bool)> {
        let cfg = RerandomizationConfig {
            k,
            alpha,
            grid: None,
            base_seed: seed,
            two_sided,
        };
        let report = py
            .detach(|| Rerandomizer::new(&self.inner)?.test(tau, &cfg))
            .map_err(to_py)?;
        Ok((report.statistic, report.p_value, report.rejected))
    }

    /// Test inversion over a grid (default τ̂_T ± 6 se): `(accepted, hull)`.
    #[pyo3(signature = (k = 100, alpha = 0.1, seed = 0, grid = None))]
    fn confidence_set(
        &self,
        py: Python<'_>,
        k: usize,
        alpha: f64,
        seed: u64,
        grid: Option<(f64, f64, f64)>,
    ) -> PyResult<ConfidenceSetTuple> {
        let cfg = RerandomizationConfig {
            k,
            alpha,
            grid: grid.map(|(lo, hi, step)| Grid { lo, hi, step }),
            base_seed: seed,
            two_sided: false,
        };
        let set = py
            .detach(|| Rerandomizer::new(&self.inner)?.invert(&cfg))
            .map_err(to_py)?;
        Ok((set.accepted, set.hull))
    }

    fn __repr__(&self) -> String {
        format!(
            "Experiment(design={}, epochs={}, treated={})",
            self.design(),
            self.inner.horizon(),
            self.inner.treated_set.len()
        )
    }
}

/// Runs one design on benchmark instance `instance` of a TOML config (desk
/// scale when `config` is None).
#[pyfunction]
#[pyo3(signature = (config = None, design = "scts", tau = 1.0, instance = 0))]
fn simulate(py: Python<'_>, config: Option<&str>, design: &str, tau: f64, instance: usize) -> PyResult<PyExperiment> {
    let cfg = self::config(config)?;
    let kind: DesignKind = design.parse().map_err(to_py)?;
    let inner = py
        .detach(|| bench::simulate(&cfg, kind, tau, instance))
        .map_err(to_py)?;
    Ok(PyExperiment { inner })
}

/// Regret benchmark; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn run_benchmark(py: Python<'_>, config: Option<&str>) -> PyResult<String> {
    let cfg = self::config(config)?;
    let report = py.detach(|| bench::run_benchmark(&cfg)).map_err(to_py)?;
    serde_json_string(&report)
}

/// Coverage / power benchmark; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn run_inference_benchmark(py: Python<'_>, config: Option<&str>) -> PyResult<String> {
    let cfg = self::config(config)?;
    let report = py.detach(|| bench::run_inference_benchmark(&cfg)).map_err(to_py)?;
    serde_json_string(&report)
}

fn serde_json_string<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| SctsDataError::new_err(e.to_string()))
}

#[pymodule]
fn scts(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SctsDataError", m.py().get_type::<SctsDataError>())?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(estimate_factors, m)?)?;
    m.add_function(wrap_pyfunction!(procrustes_align, m)?)?;
    m.add_function(wrap_pyfunction!(fit_ridge, m)?)?;
    m.add_function(wrap_pyfunction!(beta_t, m)?)?;
    m.add_function(wrap_pyfunction!(fit_sc_weights, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(run_inference_benchmark, m)?)?;
    Ok(())
}
