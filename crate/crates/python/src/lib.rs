//! Python bindings. Structured results come back as plain dicts and lists.

use moe_lab::adversarial::{self, Construction};
use moe_lab::harness::{self, Metric, Setting, SweepConfig};
use moe_lab::identify::{self, CheckConfig, FamilyMode};
use moe_lab::losses::DEFAULT_QUADRATURE_NODES;
use moe_lab::seed::{stage_seed, Stage};
use moe_lab::{
    fit_sgd, gauge_fix, generate_dataset, init_for_budget, Activation, Atom, ExpertSpec, FitConfig, InputDistribution,
    MoeError, VoronoiLoss,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(moe_lab, MoeLabError, PyException);
create_exception!(moe_lab, ConfigError, MoeLabError);
create_exception!(moe_lab, OptimizationError, MoeLabError);
create_exception!(moe_lab, CapabilityError, MoeLabError);
create_exception!(moe_lab, ConstructionError, MoeLabError);

fn py_err(e: MoeError) -> PyErr {
    let msg = e.to_string();
    match e {
        MoeError::Input(_) | MoeError::Config(_) | MoeError::Domain(_) => ConfigError::new_err(msg),
        MoeError::Divergence { .. } | MoeError::SweepDiverged { .. } => OptimizationError::new_err(msg),
        MoeError::Capability(_) => CapabilityError::new_err(msg),
        MoeError::Construction(_) => ConstructionError::new_err(msg),
        MoeError::Io { .. } => PyOSError::new_err(msg),
    }
}

fn parse<T: std::str::FromStr<Err = MoeError>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| MoeLabError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Mixing measure G = sum_i exp(beta0_i) delta_(beta1_i, eta_i).
#[pyclass(name = "MixingMeasure", module = "moe_lab", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyMeasure {
    inner: moe_lab::MixingMeasure,
}

#[pymethods]
impl PyMeasure {
    /// `atoms` is a list of (beta0, beta1, eta) with beta1 and eta lists.
    #[new]
    fn new(family: &str, atoms: Vec<(f64, Vec<f64>, Vec<f64>)>) -> PyResult<Self> {
        let atoms = atoms.into_iter().map(|(b0, b1, eta)| Atom::new(b0, b1, eta)).collect();
        let inner = moe_lab::MixingMeasure::new(parse(family)?, atoms).map_err(py_err)?;
        Ok(PyMeasure { inner })
    }

    #[staticmethod]
    fn reference_truth(family: &str) -> PyResult<Self> {
        let inner = moe_lab::MixingMeasure::reference_truth(parse(family)?).map_err(py_err)?;
        Ok(PyMeasure { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(|e| ConfigError::new_err(e.to_string()))?;
        Ok(PyMeasure { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| MoeLabError::new_err(e.to_string()))
    }

    #[getter]
    fn expert(&self) -> String {
        self.inner.expert().to_string()
    }

    #[getter]
    fn num_atoms(&self) -> usize {
        self.inner.num_atoms()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn atoms(&self) -> Vec<(f64, Vec<f64>, Vec<f64>)> {
        self.inner.atoms().iter().map(|a| (a.beta0, a.beta1.clone(), a.eta.clone())).collect()
    }

    fn weights(&self) -> Vec<f64> {
        self.inner.weights()
    }

    fn gate_weights(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.gate_weights(&x).map_err(py_err)
    }

    /// f_G(x).
    fn eval(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.eval(&x).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("MixingMeasure({}, {} atoms, d={})", self.inner.expert(), self.inner.num_atoms(), self.inner.dim())
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

/// Voronoi loss between a fitted and a true measure; `kind` is d1, d2 or d3:<r>.
#[pyfunction]
#[pyo3(signature = (g, truth, kind = "d2"))]
fn loss(g: &PyMeasure, truth: &PyMeasure, kind: &str) -> PyResult<f64> {
    let l: VoronoiLoss = parse(kind)?;
    Ok(l.evaluate(&g.inner, &truth.inner).map_err(py_err)?.total)
}

/// L2 distance between regression functions under Uniform[0, 1]^d.
#[pyfunction]
#[pyo3(signature = (g, truth, nodes = DEFAULT_QUADRATURE_NODES))]
fn l2_distance(g: &PyMeasure, truth: &PyMeasure, nodes: usize) -> PyResult<f64> {
    let mu = InputDistribution::Uniform { dim: g.inner.dim() };
    moe_lab::l2_distance(&g.inner, &truth.inner, &mu, nodes).map_err(py_err)
}

/// Simulates n samples from the reference truth (or `truth`) and fits k
/// components. Returns (fitted measure, summary dict).
#[pyfunction]
#[pyo3(signature = (family = "ridge-sigmoid", n = 10_000, k = None, noise_var = 1.0, seed = 0,
                    truth = None, learning_rate = None, epochs = None, batch_size = None, init_spread = None))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    family: &str,
    n: usize,
    k: Option<usize>,
    noise_var: f64,
    seed: u64,
    truth: Option<PyMeasure>,
    learning_rate: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    init_spread: Option<f64>,
) -> PyResult<(PyMeasure, Py<PyAny>)> {
    let spec: ExpertSpec = parse(family)?;
    let truth = match truth {
        Some(t) => t.inner,
        None => moe_lab::MixingMeasure::reference_truth(spec).map_err(py_err)?,
    };
    let d = FitConfig::default();
    let cfg = FitConfig {
        k: k.unwrap_or(truth.num_atoms()),
        learning_rate: learning_rate.unwrap_or(d.learning_rate),
        epochs: epochs.unwrap_or(d.epochs),
        batch_size: batch_size.or(d.batch_size),
        init_spread: init_spread.unwrap_or(d.init_spread),
        seed: stage_seed(seed, Stage::Train),
        ..d
    };
    let (g, summary) = py
        .detach(|| -> moe_lab::Result<_> {
            let mu = InputDistribution::Uniform { dim: truth.dim() };
            let data = generate_dataset(&truth, n, noise_var, &mu, stage_seed(seed, Stage::Data))?;
            let init = init_for_budget(&truth, cfg.k, cfg.init_spread, stage_seed(seed, Stage::Init))?;
            let fit = fit_sgd(&data, &init, Some(&truth), &cfg)?;
            let g = gauge_fix(&fit.g_hat, &truth, cfg.gauge)?;
            let l2 = moe_lab::l2_distance(&g, &truth, &mu, DEFAULT_QUADRATURE_NODES)?;
            let summary = serde_json::json!({
                "fit": cfg,
                "final_objective": fit.final_objective,
                "objective_trace": fit.objective_trace,
                "l2_distance": l2,
            });
            Ok((g, summary))
        })
        .map_err(py_err)?;
    Ok((PyMeasure { inner: g }, to_py(py, &summary)?))
}

/// Convergence-rate sweep; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (family = "ridge-sigmoid", setting = "exact", metric = "voronoi", quick = false,
                    n_grid = None, replications = None, seed = 0))]
fn sweep(
    py: Python<'_>,
    family: &str,
    setting: &str,
    metric: &str,
    quick: bool,
    n_grid: Option<Vec<usize>>,
    replications: Option<usize>,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let setting: Setting = parse(setting)?;
    let metric: Metric = parse(metric)?;
    let mut cfg = SweepConfig::reference(parse(family)?, setting).map_err(py_err)?;
    if quick {
        cfg = cfg.quick();
    }
    if let Some(g) = n_grid {
        cfg.n_grid = g;
    }
    if let Some(r) = replications {
        cfg.replications = r;
    }
    cfg.master_seed = seed;
    let report = py
        .detach(|| match metric {
            Metric::Voronoi => harness::run_sweep(&cfg),
            Metric::L2 => harness::l2_rate_sweep(&cfg),
        })
        .map_err(py_err)?;
    to_py(py, &report)
}

/// Rank test. `subject` is an expert family ("ridge-sigmoid") or a bare
/// activation ("tanh"); an activation defaults to the independence mode.
#[pyfunction]
#[pyo3(signature = (subject, mode = None, k = 2, dim = 1, seed = 0, trials = identify::DEFAULT_TRIALS,
                    threshold = identify::DEFAULT_THRESHOLD))]
fn check(
    py: Python<'_>,
    subject: &str,
    mode: Option<&str>,
    k: usize,
    dim: usize,
    seed: u64,
    trials: usize,
    threshold: f64,
) -> PyResult<Py<PyAny>> {
    let (spec, by_activation) = match subject.parse::<ExpertSpec>() {
        Ok(s) => (s, false),
        Err(_) => (identify::activation_spec(parse::<Activation>(subject)?), true),
    };
    let mode = match mode {
        Some(m) => parse(m)?,
        None if by_activation => FamilyMode::Independence,
        None => FamilyMode::Identifiability,
    };
    let cfg = CheckConfig { k, dim, seed, trials, threshold, domain: None };
    let verdict = py.detach(|| identify::check_family(spec, mode, &cfg)).map_err(py_err)?;
    to_py(py, &verdict)
}

/// Ratio L2 / D3,r along the slow-rate witness sequence.
#[pyfunction]
#[pyo3(signature = (family = "linear", r = 2.0, n_grid = vec![10, 100, 1000], b1 = 2.0))]
fn ratio_curve(py: Python<'_>, family: &str, r: f64, n_grid: Vec<u64>, b1: f64) -> PyResult<Py<PyAny>> {
    let spec: ExpertSpec = parse(family)?;
    let construction = Construction::for_family(spec).map_err(py_err)?;
    let truth = match construction {
        Construction::Ridge => adversarial::zero_slope_truth(spec, b1),
        Construction::Polynomial => moe_lab::MixingMeasure::reference_truth(spec),
    }
    .map_err(py_err)?;
    let mu = InputDistribution::Uniform { dim: truth.dim() };
    let curve = py
        .detach(|| adversarial::ratio_curve(&truth, r, &n_grid, &mu, construction))
        .map_err(py_err)?;
    to_py(py, &curve)
}

#[pymodule]
#[pyo3(name = "moe_lab")]
fn moe_lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add_class::<PyMeasure>()?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(l2_distance, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(ratio_curve, m)?)?;
    m.add("MoeLabError", py.get_type::<MoeLabError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("OptimizationError", py.get_type::<OptimizationError>())?;
    m.add("CapabilityError", py.get_type::<CapabilityError>())?;
    m.add("ConstructionError", py.get_type::<ConstructionError>())?;
    Ok(())
}
