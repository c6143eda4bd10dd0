//! Python module `ebsde_lab`.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ebsde_core::grid::{scalar_coefficients, solve_ergodic_hjb_1d, Grid1D};
use ebsde_core::heat::point_values;
use ebsde_core::{validate_hamiltonian, validate_model, run_schedule, EbsdeSolution, Error, ExperimentConfig, StateVec};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidModel(_) | Error::Basis(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn state(x: Vec<f64>, dim: usize) -> PyResult<StateVec> {
    if x.len() != dim {
        return Err(PyValueError::new_err(format!("expected a point of dimension {dim}, got {}", x.len())));
    }
    StateVec::new(x).map_err(to_py)
}

/// An experiment configuration resolved into a model, Hamiltonian and run settings.
#[pyclass(module = "ebsde_lab")]
struct Experiment {
    inner: ebsde_core::Experiment,
}

#[pymethods]
impl Experiment {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = ExperimentConfig::from_toml(text).and_then(|c| c.build()).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = ExperimentConfig::load(path.as_ref()).and_then(|c| c.build()).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.model.dim
    }

    #[getter]
    fn noise_dim(&self) -> usize {
        self.inner.model.noise_dim
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.run.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.run.seed = seed;
    }

    #[getter]
    fn n_paths(&self) -> usize {
        self.inner.run.n_paths
    }

    #[setter]
    fn set_n_paths(&mut self, n: usize) {
        self.inner.run.n_paths = n;
    }

    /// `(passed, constants)` for the forward model and the Hamiltonian together.
    fn validate(&self, py: Python<'_>) -> PyResult<(bool, BTreeMap<String, f64>)> {
        let exp = &self.inner;
        py.detach(|| {
            let m = validate_model(&exp.model, 64, exp.run.init.radius, exp.run.seed)?;
            let h = validate_hamiltonian(&exp.hamiltonian, 64, exp.run.seed)?;
            let mut constants = m.constants.clone();
            constants.extend(h.constants.iter().map(|(k, v)| (k.clone(), *v)));
            Ok((m.passed && h.passed, constants))
        })
        .map_err(to_py)
    }

    /// Runs the vanishing-discount pipeline.
    fn solve(&self, py: Python<'_>) -> PyResult<Solution> {
        let exp = &self.inner;
        let inner = py
            .detach(|| {
                let query = exp.query_points()?;
                run_schedule(&exp.model, &exp.hamiltonian, &exp.run, &query)
            })
            .map_err(to_py)?;
        Ok(Solution { inner })
    }

    /// Grid solution of the one-dimensional ergodic HJB equation: `(lambda, x, v)`.
    #[pyo3(signature = (half_width=8.0, nodes=1201))]
    fn oracle(&self, py: Python<'_>, half_width: f64, nodes: usize) -> PyResult<(f64, Vec<f64>, Vec<f64>)> {
        let exp = &self.inner;
        py.detach(|| {
            let (drift, g) = scalar_coefficients(&exp.model)?;
            let grid = Grid1D::symmetric(half_width, nodes)?;
            let sol = solve_ergodic_hjb_1d(&grid, &drift, g, &exp.hamiltonian)?;
            let lambda = sol.lambda.ok_or_else(|| Error::Numerical("no ergodic constant".into()))?;
            Ok((lambda, sol.x.clone(), sol.values.clone()))
        })
        .map_err(to_py)
    }

    /// Heat-model report as JSON, or `None` for other models.
    fn heat_report(&self) -> Option<String> {
        self.inner.heat_report.as_ref().and_then(|r| serde_json::to_string(r).ok())
    }

    fn __repr__(&self) -> String {
        format!(
            "Experiment(model={}, dim={}, hamiltonian={:?})",
            self.inner.model.nonlinear_drift.name, self.inner.model.dim, self.inner.hamiltonian.label
        )
    }
}

/// Output of the vanishing-discount pipeline.
#[pyclass(module = "ebsde_lab")]
struct Solution {
    inner: EbsdeSolution,
}

#[pymethods]
impl Solution {
    /// The ergodic constant.
    #[getter]
    fn ergodic_constant(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn lambda_stderr(&self) -> f64 {
        self.inner.lambda_stderr
    }

    fn vbar(&self, x: Vec<f64>) -> PyResult<f64> {
        Ok(self.inner.vbar_at(&state(x, self.inner.zetabar.dim)?))
    }

    fn zetabar(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.zetabar_at(&state(x, self.inner.zetabar.dim)?))
    }

    /// `(alpha, alpha * v_alpha(0))` pairs in schedule order.
    fn schedule(&self) -> Vec<(f64, f64)> {
        self.inner.schedule_record.iter().map(|e| (e.alpha, e.lambda_alpha)).collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let mut inner: EbsdeSolution =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.prepare().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        format!("Solution(lambda={:?}, stderr={:?})", self.inner.lambda, self.inner.lambda_stderr)
    }
}

/// Field values `sum_k x_k sqrt(2) sin(k pi xi)` of a sine-mode state.
#[pyfunction]
fn heat_point_values(modes: Vec<f64>, xis: Vec<f64>) -> PyResult<Vec<f64>> {
    let x = StateVec::new(modes).map_err(to_py)?;
    Ok(point_values(x.as_slice(), &xis))
}

#[pymodule]
fn ebsde_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Experiment>()?;
    m.add_class::<Solution>()?;
    m.add_function(wrap_pyfunction!(heat_point_values, m)?)?;
    Ok(())
}
