//! Python bindings: scenarios, runs, the mode bank and a few numerics.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use ::nisme::bank::{init_bank, nisme_step, BankConfig, BankState};
use ::nisme::decomposition::build_transforms;
use ::nisme::numerics::{chi_square_quantile as chi2_q, Matrix, Vector};
use ::nisme::plant::{sample_initial_state, simulate as sim, SimConfig};
use ::nisme::scenario::{execute, reduce_scenario, run_scenario, setup, ScenarioSpec};
use ::nisme::{Error, ModeModel};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        Error::Config { .. } | Error::Domain(_) | Error::Dimension { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(PyValueError::new_err("matrix rows must have equal length"));
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn vec_of(v: &Vector) -> Vec<f64> {
    v.iter().copied().collect()
}

fn toml_to_py<'py>(py: Python<'py>, v: &toml::Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        toml::Value::String(s) => s.into_pyobject(py)?.into_any(),
        toml::Value::Integer(i) => i.into_pyobject(py)?.into_any(),
        toml::Value::Float(f) => f.into_pyobject(py)?.into_any(),
        toml::Value::Boolean(b) => b.into_pyobject(py)?.to_owned().into_any(),
        toml::Value::Datetime(d) => d.to_string().into_pyobject(py)?.into_any(),
        toml::Value::Array(a) => {
            let items = a.iter().map(|x| toml_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        toml::Value::Table(t) => {
            let d = PyDict::new(py);
            for (k, x) in t {
                d.set_item(k, toml_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn serde_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = toml::Value::try_from(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    toml_to_py(py, &v)
}

/// A scenario file.
#[pyclass(name = "Scenario")]
#[derive(Clone)]
struct PyScenario {
    spec: ScenarioSpec,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyScenario {
            spec: ScenarioSpec::load(&path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyScenario {
            spec: ScenarioSpec::from_toml(text).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.spec.to_toml()
    }

    fn validate(&self) -> PyResult<()> {
        self.spec.validate().map_err(to_py)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.spec.seed
    }
    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.spec.seed = seed;
    }
    #[getter]
    fn horizon(&self) -> f64 {
        self.spec.horizon
    }
    #[setter]
    fn set_horizon(&mut self, horizon: f64) {
        self.spec.horizon = horizon;
    }
    #[getter]
    fn dt(&self) -> f64 {
        self.spec.dt
    }
    #[getter]
    fn steps(&self) -> usize {
        self.spec.steps()
    }

    /// Runs the scenario and writes its artifacts; returns the metrics.
    fn run<'py>(&self, py: Python<'py>, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let m = py.allow_threads(|| run_scenario(&self.spec, &out)).map_err(to_py)?;
        serde_to_py(py, &m)
    }

    /// Runs the scenario in memory.
    fn execute<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = py.allow_threads(|| execute(&self.spec)).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("metrics", serde_to_py(py, &r.metrics)?)?;
        d.set_item("times", r.truth.times.clone())?;
        d.set_item("true_modes", r.truth.modes.iter().map(|l| l.to_string()).collect::<Vec<_>>())?;
        d.set_item("modes", r.estimates.modes.iter().map(|l| l.to_string()).collect::<Vec<_>>())?;
        d.set_item("selected", r.estimates.selected.clone())?;
        d.set_item("x_hat", r.estimates.x_hat.iter().map(vec_of).collect::<Vec<_>>())?;
        d.set_item("attack_now", r.estimates.attack_now.iter().map(vec_of).collect::<Vec<_>>())?;
        d.set_item("attack_prev", r.estimates.attack_prev.iter().map(vec_of).collect::<Vec<_>>())?;
        d.set_item("posteriors", r.estimates.posteriors.clone())?;
        d.set_item("labels", r.labels.iter().map(|l| l.to_string()).collect::<Vec<_>>())?;
        Ok(d)
    }

    /// Simulates the plant only.
    #[pyo3(signature = (noisy = true))]
    fn simulate<'py>(&self, py: Python<'py>, noisy: bool) -> PyResult<Bound<'py, PyDict>> {
        let s = setup(&self.spec).map_err(to_py)?;
        let x0 = sample_initial_state(&s.x_eq, &s.p0, self.spec.seed).map_err(to_py)?;
        let cfg = SimConfig {
            dt: self.spec.dt,
            horizon: self.spec.horizon,
            seed: self.spec.seed,
            noisy,
        };
        let t = sim(&s.network, &s.schedule, &s.controller, &s.q, &s.r, &x0, &cfg).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("times", t.times.clone())?;
        d.set_item("states", t.states.iter().map(vec_of).collect::<Vec<_>>())?;
        d.set_item("outputs", t.outputs.iter().map(vec_of).collect::<Vec<_>>())?;
        d.set_item("inputs", t.inputs.iter().map(vec_of).collect::<Vec<_>>())?;
        d.set_item("attacks", t.attacks.iter().map(vec_of).collect::<Vec<_>>())?;
        d.set_item("modes", t.modes.iter().map(|l| l.to_string()).collect::<Vec<_>>())?;
        Ok(d)
    }

    /// Mode reduction audit, one dict per candidate mode.
    fn reduce<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let s = setup(&self.spec).map_err(to_py)?;
        let (_, audit) = reduce_scenario(&self.spec, &s).map_err(to_py)?;
        serde_to_py(py, &audit)
    }

    fn __repr__(&self) -> String {
        format!("Scenario(name={:?}, seed={}, horizon={})", self.spec.name, self.spec.seed, self.spec.horizon)
    }
}

/// The multiple-model bank of a scenario, stepped from Python.
#[pyclass(name = "Bank")]
struct PyBank {
    models: Vec<ModeModel>,
    cfg: BankConfig,
    state: BankState,
}

#[pymethods]
impl PyBank {
    /// Starts the bank of `scenario` at its nominal equilibrium.
    #[new]
    fn new(scenario: &PyScenario, y0: Vec<f64>, u0: Vec<f64>) -> PyResult<Self> {
        let s = setup(&scenario.spec).map_err(to_py)?;
        let cfg = scenario.spec.bank_config();
        let state = init_bank(&s.models, &s.x_eq, &s.p0, &Vector::from_vec(y0), &Vector::from_vec(u0), 0.0, &cfg)
            .map_err(to_py)?;
        Ok(PyBank {
            models: s.models,
            cfg,
            state,
        })
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.models.iter().map(|m| m.label.to_string()).collect()
    }

    #[getter]
    fn posteriors(&self) -> Vec<f64> {
        self.state.posteriors.clone()
    }

    /// One step with measurement `y`, input `u_prev` held over the last
    /// period and current input `u_now`.
    fn step<'py>(&mut self, py: Python<'py>, y: Vec<f64>, u_prev: Vec<f64>, u_now: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let (y, up, un) = (Vector::from_vec(y), Vector::from_vec(u_prev), Vector::from_vec(u_now));
        let (next, e) = py
            .allow_threads(|| nisme_step(&self.state, &self.models, &y, &up, &un, &self.cfg))
            .map_err(to_py)?;
        self.state = next;
        let d = PyDict::new(py);
        d.set_item("step", e.step)?;
        d.set_item("time", e.time)?;
        d.set_item("selected", e.selected)?;
        d.set_item("mode", e.mode.to_string())?;
        d.set_item("x_hat", vec_of(&e.x_hat))?;
        d.set_item("p_x", rows(&e.p_x))?;
        d.set_item("attack_now", vec_of(&e.attack_now))?;
        d.set_item("attack_prev", vec_of(&e.attack_prev))?;
        d.set_item("posteriors", e.posteriors)?;
        d.set_item("attack_significant", e.attack_significant)?;
        Ok(d)
    }
}

/// Output-decomposition transforms for attack selections `h` and `g`.
#[pyfunction]
fn decompose<'py>(
    py: Python<'py>,
    h: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let t = build_transforms(&matrix(h)?, &matrix(r)?, &matrix(c)?, &matrix(g)?).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("t1", rows(&t.t1))?;
    d.set_item("t2", rows(&t.t2))?;
    d.set_item("z2_map", rows(&t.z2_map()))?;
    d.set_item("z3_map", rows(&t.z3_map()))?;
    d.set_item("v1", rows(&t.v1))?;
    d.set_item("v2", rows(&t.v2))?;
    d.set_item("sigma", vec_of(&t.sigma))?;
    d.set_item("sigma_bar", vec_of(&t.sigma_bar))?;
    d.set_item("p", (t.p1(), t.p2(), t.p3()))?;
    Ok(d)
}

/// Value `q` with `P(X <= q) = alpha` for a chi-square variable with `df` degrees.
#[pyfunction]
fn chi_square_quantile(df: usize, alpha: f64) -> PyResult<f64> {
    chi2_q(df, alpha).map_err(to_py)
}

#[pymodule]
#[pyo3(name = "nisme")]
fn nisme_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyBank>()?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(chi_square_quantile, m)?)?;
    Ok(())
}
