//! Python bindings for the `bmc-lab` library.

use pyo3::exceptions::{PyRuntimeError, PyTimeoutError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lab::experiment::detect_regime as detect;
use lab::limit_variance::{sigma_crit_g, sigma_crit_t, sigma_sub_g, sigma_sub_t, DEFAULT_TOLERANCE};
use lab::moment_oracle::{generation_moments, tree_moments};
use lab::stat_tests::{clt_verdicts, CltVerdict};
use lab::supercritical::ratio_diagnostic;
use lab::{
    BmcError, Ensemble, Functionals, InitialLaw, Regime, SimulationConfig,
};

fn to_py(err: BmcError) -> PyErr {
    match err {
        BmcError::BudgetExceeded { .. } => PyTimeoutError::new_err(err.to_string()),
        BmcError::Io(_) => PyRuntimeError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn law(x0: Option<f64>) -> InitialLaw {
    x0.map_or(InitialLaw::Stationary, InitialLaw::Point)
}

/// Gaussian autoregressive kernel: each child is `a * x + sigma * eps`.
#[pyclass(name = "BarKernel", frozen)]
#[derive(Clone)]
struct PyBarKernel(lab::BarKernel);

#[pymethods]
impl PyBarKernel {
    #[new]
    #[pyo3(signature = (a, sigma = 1.0))]
    fn new(a: f64, sigma: f64) -> PyResult<Self> {
        lab::BarKernel::new(a, sigma).map(Self).map_err(to_py)
    }

    /// Kernel at `a = 1/sqrt(2)`, or `-1/sqrt(2)` when `negative`.
    #[staticmethod]
    #[pyo3(signature = (negative = false, sigma = 1.0))]
    fn critical(negative: bool, sigma: f64) -> PyResult<Self> {
        lab::BarKernel::critical(negative, sigma).map(Self).map_err(to_py)
    }

    #[getter]
    fn a(&self) -> f64 {
        self.0.a()
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.0.sigma()
    }

    /// Standard deviation of the invariant law.
    #[getter]
    fn sigma_a(&self) -> f64 {
        self.0.sigma_a()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha()
    }

    /// One of `"sub"`, `"critical"`, `"super"`.
    #[getter]
    fn regime(&self) -> &'static str {
        self.0.regime().short_label()
    }

    fn __repr__(&self) -> String {
        format!("BarKernel(a={}, sigma={})", self.0.a(), self.0.sigma())
    }
}

/// A polynomial observable stored by its Hermite coefficients.
#[pyclass(name = "Observable", frozen)]
#[derive(Clone)]
struct PyObservable(lab::Observable);

#[pymethods]
impl PyObservable {
    /// Observable with the given Hermite coefficients in the kernel's basis.
    #[new]
    fn new(kernel: &PyBarKernel, coeffs: Vec<f64>) -> PyResult<Self> {
        lab::Observable::for_kernel(&kernel.0, coeffs).map(Self).map_err(to_py)
    }

    /// Named observable, e.g. `"identity"`, `"square-centered"` or `"hermite:3"`.
    #[staticmethod]
    fn preset(name: &str, kernel: &PyBarKernel) -> PyResult<Self> {
        lab::Observable::preset(name, &kernel.0).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn identity(kernel: &PyBarKernel) -> PyResult<Self> {
        lab::Observable::identity(&kernel.0).map(Self).map_err(to_py)
    }

    #[getter]
    fn coeffs(&self) -> Vec<f64> {
        self.0.coeffs().to_vec()
    }

    #[getter]
    fn degree(&self) -> usize {
        self.0.degree()
    }

    /// Mean under the invariant law.
    #[getter]
    fn mean(&self) -> f64 {
        self.0.mean()
    }

    fn center(&self) -> Self {
        Self(self.0.center())
    }

    fn __call__(&self, x: f64) -> f64 {
        self.0.eval(x)
    }

    fn __repr__(&self) -> String {
        format!("Observable(coeffs={:?})", self.0.coeffs())
    }
}

/// `(mean, second_moment)` of the generation sum at depth `n`; the root is
/// stationary unless `x0` is given.
#[pyfunction]
#[pyo3(signature = (f, n, kernel, x0 = None))]
fn generation_moment(f: &PyObservable, n: u32, kernel: &PyBarKernel, x0: Option<f64>) -> PyResult<(f64, f64)> {
    let m = generation_moments(&f.0, n, law(x0), &kernel.0).map_err(to_py)?;
    Ok((m.mean, m.second))
}

/// `(mean, second_moment)` of the subtree sum up to depth `n`.
#[pyfunction]
#[pyo3(signature = (f, n, kernel, x0 = None))]
fn tree_moment(f: &PyObservable, n: u32, kernel: &PyBarKernel, x0: Option<f64>) -> PyResult<(f64, f64)> {
    let m = tree_moments(&f.0, n, law(x0), &kernel.0).map_err(to_py)?;
    Ok((m.mean, m.second))
}

/// Asymptotic variance of the normalised generation sum.
#[pyfunction]
#[pyo3(signature = (f, kernel, tol = DEFAULT_TOLERANCE))]
fn sigma_generation(f: &PyObservable, kernel: &PyBarKernel, tol: f64) -> PyResult<f64> {
    let report = match kernel.0.regime() {
        Regime::Critical => sigma_crit_g(&f.0, &kernel.0),
        _ => sigma_sub_g(&f.0, &kernel.0, tol),
    };
    report.map(|r| r.value).map_err(to_py)
}

/// Asymptotic variance of the normalised subtree sum.
#[pyfunction]
#[pyo3(signature = (f, kernel, tol = DEFAULT_TOLERANCE))]
fn sigma_tree(f: &PyObservable, kernel: &PyBarKernel, tol: f64) -> PyResult<f64> {
    let report = match kernel.0.regime() {
        Regime::Critical => sigma_crit_t(&f.0, &kernel.0),
        _ => sigma_sub_t(&f.0, &kernel.0, tol),
    };
    report.map(|r| r.value).map_err(to_py)
}

fn config(kernel: &PyBarKernel, depth: u32, replicates: usize, seed: u64, x0: Option<f64>) -> SimulationConfig {
    SimulationConfig::new(kernel.0, depth, replicates, law(x0), seed)
}

/// Simulates `replicates` trees and returns the centred generation and
/// subtree sums of `f` at depth `depth`, one entry per replicate.
#[pyfunction]
#[pyo3(signature = (kernel, f, depth, replicates, seed = 0, x0 = None))]
fn simulate(
    py: Python<'_>,
    kernel: &PyBarKernel,
    f: &PyObservable,
    depth: u32,
    replicates: usize,
    seed: u64,
    x0: Option<f64>,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let cfg = config(kernel, depth, replicates, seed, x0);
    let funcs = Functionals::observables(vec![f.0.clone()]);
    let ensemble: Ensemble = py
        .allow_threads(|| lab::simulator::run_replicates(&cfg, &funcs))
        .map_err(to_py)?;
    Ok((ensemble.generation_values(0, depth), ensemble.tree_values(0)))
}

fn verdict_dict<'py>(py: Python<'py>, v: &CltVerdict) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("empirical_mean", v.empirical_mean)?;
    d.set_item("empirical_variance", v.empirical_variance)?;
    d.set_item("variance_stderr", v.variance_stderr)?;
    d.set_item("target_exact", v.target_variance_exact_n)?;
    d.set_item("target_asymptotic", v.target_variance_asymptotic)?;
    d.set_item("ks_statistic", v.ks_statistic)?;
    d.set_item("pass_exact", v.pass_exact)?;
    d.set_item("pass_asymptotic", v.pass_asymptotic)?;
    d.set_item("pass_normality", v.pass_normality)?;
    d.set_item("passed", v.passed())?;
    Ok(d)
}

/// CLT verdicts for the generation and subtree statistics of `f`.
#[pyfunction]
#[pyo3(signature = (kernel, f, depth, replicates, seed = 0, x0 = None))]
fn clt<'py>(
    py: Python<'py>,
    kernel: &PyBarKernel,
    f: &PyObservable,
    depth: u32,
    replicates: usize,
    seed: u64,
    x0: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config(kernel, depth, replicates, seed, x0);
    let regime = kernel.0.regime();
    let report = py.allow_threads(|| clt_verdicts(&cfg, &f.0, regime)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("generation", verdict_dict(py, &report.generation)?)?;
    d.set_item("tree", verdict_dict(py, &report.tree)?)?;
    Ok(d)
}

/// Median and 10/90% quantiles of the subtree/generation ratio of `f`,
/// with its limit under `"target"`.
#[pyfunction]
#[pyo3(signature = (kernel, f, depth, replicates, seed = 0, x0 = None))]
fn supercritical_ratio<'py>(
    py: Python<'py>,
    kernel: &PyBarKernel,
    f: &PyObservable,
    depth: u32,
    replicates: usize,
    seed: u64,
    x0: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config(kernel, depth, replicates, seed, x0);
    let s = py.allow_threads(|| ratio_diagnostic(&cfg, &f.0)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("median", s.median)?;
    d.set_item("lower", s.lower)?;
    d.set_item("upper", s.upper)?;
    d.set_item("used", s.used)?;
    d.set_item("excluded", s.excluded)?;
    d.set_item("target", s.target)?;
    Ok(d)
}

/// `(regime, growth_ratio)` from the exact variance growth at depth `n`.
#[pyfunction]
#[pyo3(signature = (kernel, n = 16))]
fn detect_regime(kernel: &PyBarKernel, n: u32) -> PyResult<(&'static str, f64)> {
    let (regime, ratio, _) = detect(&kernel.0, n).map_err(to_py)?;
    Ok((regime.short_label(), ratio))
}

#[pymodule]
fn bmc_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyBarKernel>()?;
    m.add_class::<PyObservable>()?;
    m.add_function(wrap_pyfunction!(generation_moment, m)?)?;
    m.add_function(wrap_pyfunction!(tree_moment, m)?)?;
    m.add_function(wrap_pyfunction!(sigma_generation, m)?)?;
    m.add_function(wrap_pyfunction!(sigma_tree, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(clt, m)?)?;
    m.add_function(wrap_pyfunction!(supercritical_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(detect_regime, m)?)?;
    Ok(())
}
