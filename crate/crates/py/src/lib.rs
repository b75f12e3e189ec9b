//! Python bindings: grids, manufactured cases, reconstruction and the
//! experiment harness.

use std::path::PathBuf;
use std::sync::Arc;

use mfg_lab::grid::{build_grid, Face, GridSpec, Side};
use mfg_lab::harness::{build_case, execute, run, Experiment, ExperimentConfig, Overrides, ResolvedConfig};
use mfg_lab::inverse::{
    direct_formula_oracle, make_inverse_data, reconstruct as solve, stability_sweep as sweep, ReconstructionConfig,
    SweepSpec,
};
use mfg_lab::system::ManufacturedCase;
use mfg_lab::weight::{build_eta, check_weight_identities, eval_weight_bundle, WeightParams};
use mfg_lab::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(list) => PyValueError::new_err(list.join("\n")),
        Error::InvalidGrid(_) | Error::InvalidArgument(_) | Error::Coefficients(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn resolve(experiment: &str, config: Option<&str>, seed: Option<u64>, out_dir: Option<PathBuf>) -> PyResult<ResolvedConfig> {
    let experiment: Experiment = experiment.parse().map_err(to_py)?;
    let cfg = match config {
        Some(src) => ExperimentConfig::from_toml(src).map_err(to_py)?,
        None => ExperimentConfig::default(),
    };
    cfg.resolve(&Overrides { experiment: Some(experiment), out_dir, seed }).map_err(to_py)
}

/// Names of the available experiments.
#[pyfunction]
fn experiments() -> Vec<&'static str> {
    Experiment::ALL.iter().map(|e| e.name()).collect()
}

/// Validate a TOML config; returns the list of problems (empty when valid).
#[pyfunction]
#[pyo3(signature = (config, experiment = "verify-weights", seed = 0))]
fn validate_config(config: &str, experiment: &str, seed: u64) -> PyResult<Vec<String>> {
    let experiment: Experiment = experiment.parse().map_err(to_py)?;
    let ov = Overrides { experiment: Some(experiment), out_dir: None, seed: Some(seed) };
    Ok(match ExperimentConfig::from_toml(config).and_then(|c| c.resolve(&ov)) {
        Ok(_) => Vec::new(),
        Err(Error::Config(list)) => list,
        Err(other) => vec![other.to_string()],
    })
}

/// Run an experiment and write its files; returns the parsed report.
#[pyfunction]
#[pyo3(signature = (experiment, out_dir, config = None, seed = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    experiment: &str,
    out_dir: PathBuf,
    config: Option<&str>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    let rc = resolve(experiment, config, seed, Some(out_dir))?;
    let report = py.detach(|| run(&rc)).map_err(to_py)?;
    json_to_py(py, &report)
}

/// Run an experiment in memory; returns `{"summary": ..., "files": {name: text}}`.
#[pyfunction]
#[pyo3(signature = (experiment, config = None, seed = None))]
fn execute_experiment<'py>(
    py: Python<'py>,
    experiment: &str,
    config: Option<&str>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let rc = resolve(experiment, config, seed, None)?;
    let out = py.detach(|| execute(&rc)).map_err(to_py)?;
    let files = PyDict::new(py);
    for (name, bytes) in out.files().map_err(to_py)? {
        files.set_item(name, String::from_utf8_lossy(&bytes).into_owned())?;
    }
    let d = PyDict::new(py);
    d.set_item("summary", json_to_py(py, &out.summary)?)?;
    d.set_item("files", files)?;
    Ok(d)
}

/// A uniform space-time grid.
#[pyclass(name = "Grid", frozen)]
struct PyGrid {
    inner: Arc<mfg_lab::grid::Grid>,
}

#[pymethods]
impl PyGrid {
    /// `nx` per axis (one or two axes); observed on the face `x1 = L1`.
    #[new]
    #[pyo3(signature = (nx, nt, lengths = None, t_final = 1.0))]
    fn new(nx: Vec<usize>, nt: usize, lengths: Option<Vec<f64>>, t_final: f64) -> PyResult<Self> {
        let lengths = lengths.unwrap_or_else(|| vec![1.0; nx.len()]);
        let spec = GridSpec { lengths, t_final, nx, nt, gamma: vec![Face::new(0, Side::High)] };
        Ok(Self { inner: build_grid(&spec).map_err(to_py)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    #[getter]
    fn nx(&self) -> Vec<usize> {
        self.inner.nx().to_vec()
    }
    #[getter]
    fn nt(&self) -> usize {
        self.inner.nt()
    }
    #[getter]
    fn h(&self) -> Vec<f64> {
        self.inner.h().to_vec()
    }
    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau()
    }
    #[getter]
    fn k0(&self) -> usize {
        self.inner.k0()
    }
    #[getter]
    fn t0(&self) -> f64 {
        self.inner.t(self.inner.k0())
    }

    /// Spatial node coordinates, one list per node.
    fn points(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n_space()).map(|j| self.inner.point(j)[..self.inner.dim()].to_vec()).collect()
    }

    /// Results of the weight identity checks at `(lambda, s)`.
    fn weight_identities<'py>(&self, py: Python<'py>, lambda_: f64, s: f64) -> PyResult<Bound<'py, PyAny>> {
        let eta = build_eta(&self.inner, None).map_err(to_py)?;
        let params = WeightParams::new(lambda_, s).map_err(to_py)?;
        let bundle = eval_weight_bundle(&eta, params, &self.inner).map_err(to_py)?;
        json_to_py(py, &check_weight_identities(&bundle))
    }

    fn __repr__(&self) -> String {
        format!("Grid(nx={:?}, nt={})", self.inner.nx(), self.inner.nt())
    }
}

/// A manufactured solution of the linear system with known sources.
#[pyclass(name = "Case", frozen)]
struct PyCase {
    inner: ManufacturedCase,
}

#[pymethods]
impl PyCase {
    /// Build the case described by the `[grid]`, `[coefficients]` and
    /// `[case]` sections of a TOML config.
    #[staticmethod]
    #[pyo3(signature = (config = None, seed = 0))]
    fn from_config(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let rc = resolve("reconstruct", config, Some(seed), None)?;
        Ok(Self { inner: build_case(&rc.config, rc.seed).map_err(to_py)? })
    }

    #[getter]
    fn grid(&self) -> PyGrid {
        PyGrid { inner: self.inner.grid().clone() }
    }
    /// Space-time values of `u`, time-major.
    #[getter]
    fn u(&self) -> Vec<f64> {
        self.inner.u.values().to_vec()
    }
    #[getter]
    fn v(&self) -> Vec<f64> {
        self.inner.v.values().to_vec()
    }
    #[getter]
    fn f(&self) -> Vec<f64> {
        self.inner.sources.f.values().to_vec()
    }
    #[getter]
    fn g(&self) -> Vec<f64> {
        self.inner.sources.g.values().to_vec()
    }

    /// Sources recovered from the full state at `t0`.
    fn oracle(&self) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let (f, g) = direct_formula_oracle(&self.inner).map_err(to_py)?;
        Ok((f.into_values(), g.into_values()))
    }

    /// Reconstruct `(f, g)` from observations with noise level `delta`.
    /// `solver` is a TOML table of solver settings.
    #[pyo3(signature = (delta = 0.0, seed = 0, solver = None))]
    fn reconstruct<'py>(
        &self,
        py: Python<'py>,
        delta: f64,
        seed: u64,
        solver: Option<&str>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg: ReconstructionConfig = match solver {
            Some(s) => toml::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => ReconstructionConfig::default(),
        };
        let res = py
            .detach(|| make_inverse_data(&self.inner, delta, seed).and_then(|d| solve(&d, &cfg)))
            .map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("f", res.f.values().to_vec())?;
        d.set_item("g", res.g.values().to_vec())?;
        d.set_item("iterations", res.iterations)?;
        d.set_item("converged", res.converged)?;
        d.set_item("relative_residual", res.relative_residual)?;
        d.set_item("objective", json_to_py(py, &res.objective)?)?;
        d.set_item("errors", json_to_py(py, &res.errors)?)?;
        d.set_item("warnings", res.warnings)?;
        Ok(d)
    }

    /// Reconstruction error against noise level with `beta = delta^2`;
    /// returns the rows and the fitted slope.
    #[pyo3(signature = (deltas, seeds))]
    fn stability_sweep<'py>(&self, py: Python<'py>, deltas: Vec<f64>, seeds: Vec<u64>) -> PyResult<Bound<'py, PyAny>> {
        let spec = SweepSpec { deltas, seeds, beta_rule: mfg_lab::inverse::BetaRule::DeltaSquared };
        let rep = py.detach(|| sweep(&self.inner, &spec, &ReconstructionConfig::default())).map_err(to_py)?;
        json_to_py(py, &rep)
    }
}

#[pymodule]
fn mfglab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyCase>()?;
    m.add_function(wrap_pyfunction!(experiments, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(execute_experiment, m)?)?;
    Ok(())
}
