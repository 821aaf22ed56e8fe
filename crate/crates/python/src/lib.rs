//! Python bindings: `import rsmfc`.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rsmfc_core::adjoint::{build_lq_adjoint, lq_optimal_control, GainTable};
use rsmfc_core::cost::{self, control_range};
use rsmfc_core::grid::TimeGrid;
use rsmfc_core::model::{self, lq_coefficients};
use rsmfc_core::riccati::{self, FormulaVariant, GammaChoice};
use rsmfc_core::runner::{self, parse_config, RunOptions};
use rsmfc_core::sim::{simulate_martingales, simulate_state};
use rsmfc_core::Error;

create_exception!(
    rsmfc,
    BlowUpError,
    PyException,
    "A gain, state or cost left the finite region."
);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(msg) => PyValueError::new_err(msg),
        e if e.is_blow_up() => BlowUpError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn gamma_choice(s: &str) -> PyResult<GammaChoice> {
    match s {
        "sigma_beta" => Ok(GammaChoice::SigmaBeta),
        "one" => Ok(GammaChoice::One),
        _ => Err(PyValueError::new_err(format!(
            "gamma_choice must be 'sigma_beta' or 'one', got {s:?}"
        ))),
    }
}

fn variant(s: &str) -> PyResult<FormulaVariant> {
    match s {
        "derived_ode" => Ok(FormulaVariant::DerivedOde),
        "paper_printed" => Ok(FormulaVariant::PaperPrinted),
        _ => Err(PyValueError::new_err(format!(
            "variant must be 'derived_ode' or 'paper_printed', got {s:?}"
        ))),
    }
}

/// Constants of the scalar LQ model.
#[pyclass(name = "LqParams", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLqParams {
    inner: model::LqParams,
}

#[pymethods]
impl PyLqParams {
    #[new]
    #[pyo3(signature = (a=0.0, b=1.0, sigma=1e-2, theta=1e-5, mu=0.0, x0=1.0, t_end=1.0))]
    fn new(a: f64, b: f64, sigma: f64, theta: f64, mu: f64, x0: f64, t_end: f64) -> PyResult<Self> {
        let inner = model::LqParams {
            a,
            b,
            sigma,
            theta,
            mu,
            x0,
            t_end,
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn a(&self) -> f64 {
        self.inner.a
    }
    #[getter]
    fn b(&self) -> f64 {
        self.inner.b
    }
    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }
    #[getter]
    fn theta(&self) -> f64 {
        self.inner.theta
    }
    #[getter]
    fn mu(&self) -> f64 {
        self.inner.mu
    }
    #[getter]
    fn x0(&self) -> f64 {
        self.inner.x0
    }
    #[getter]
    fn t_end(&self) -> f64 {
        self.inner.t_end
    }

    fn with_t_end(&self, t_end: f64) -> Self {
        Self {
            inner: self.inner.with_t_end(t_end),
        }
    }

    fn with_theta(&self, theta: f64) -> Self {
        Self {
            inner: self.inner.with_theta(theta),
        }
    }

    fn with_mu(&self, mu: f64) -> Self {
        Self {
            inner: self.inner.with_mu(mu),
        }
    }

    fn __repr__(&self) -> String {
        let p = &self.inner;
        format!(
            "LqParams(a={}, b={}, sigma={}, theta={}, mu={}, x0={}, t_end={})",
            p.a, p.b, p.sigma, p.theta, p.mu, p.x0, p.t_end
        )
    }
}

/// Closed-form Riccati gain.
#[pyclass(name = "RiccatiSolution", frozen)]
struct PyRiccati {
    inner: riccati::RiccatiSolution,
}

#[pymethods]
impl PyRiccati {
    #[new]
    #[pyo3(signature = (params, gamma_choice="sigma_beta", variant="derived_ode"))]
    fn new(params: PyRef<'_, PyLqParams>, gamma_choice: &str, variant: &str) -> PyResult<Self> {
        let inner = riccati::RiccatiSolution::new(
            params.inner,
            self::gamma_choice(gamma_choice)?,
            self::variant(variant)?,
        )
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn blow_up_time(&self) -> Option<f64> {
        self.inner.blow_up_time()
    }

    fn beta(&self, t: f64) -> PyResult<f64> {
        self.inner.beta(t).map_err(to_py)
    }

    fn alpha(&self, t: f64) -> PyResult<f64> {
        self.inner.alpha(t).map_err(to_py)
    }

    fn gamma(&self, t: f64) -> PyResult<f64> {
        self.inner.gamma(t).map_err(to_py)
    }

    /// Values on `n_steps + 1` nodes; entries past a blow-up are NaN.
    fn tabulate<'py>(&self, py: Python<'py>, n_steps: usize) -> PyResult<Bound<'py, PyDict>> {
        let grid = TimeGrid::new(self.inner.params().t_end, n_steps).map_err(to_py)?;
        let table = self.inner.tabulate(&grid).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("t", grid.nodes().collect::<Vec<f64>>())?;
        d.set_item("beta", table.beta)?;
        d.set_item("alpha", table.alpha)?;
        d.set_item("gamma", table.gamma)?;
        d.set_item("first_valid", table.first_valid)?;
        Ok(d)
    }
}

/// Blow-up time of the closed-form gain measured back from `T`, or None.
#[pyfunction]
#[pyo3(signature = (params, gamma_choice="sigma_beta", variant="derived_ode"))]
fn blow_up_time(
    params: PyRef<'_, PyLqParams>,
    gamma_choice: &str,
    variant: &str,
) -> PyResult<Option<f64>> {
    Ok(riccati::blow_up_time(
        &params.inner,
        self::gamma_choice(gamma_choice)?,
        self::variant(variant)?,
    ))
}

/// Euler-Maruyama ensemble under the optimal LQ control (plus `epsilon`).
#[pyfunction]
#[pyo3(signature = (params, n_steps, n_paths, seed, epsilon=0.0))]
fn simulate_closed_loop<'py>(
    py: Python<'py>,
    params: PyRef<'_, PyLqParams>,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    epsilon: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = params.inner;
    let ens = py
        .detach(|| {
            let grid = TimeGrid::new(p.t_end, n_steps)?;
            let ricc = riccati::RiccatiSolution::new(
                p,
                GammaChoice::SigmaBeta,
                FormulaVariant::DerivedOde,
            )?;
            let control = lq_optimal_control(&ricc, &grid)?.perturbed(epsilon);
            simulate_state(&lq_coefficients(&p), &control, p.x0, grid, n_paths, seed)
        })
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("t", ens.grid.nodes().collect::<Vec<f64>>())?;
    d.set_item("mean", ens.empirical_mean.values().to_vec())?;
    let states: Vec<Vec<f64>> = ens.states.iter().map(|s| s.values().to_vec()).collect();
    d.set_item("states", states)?;
    d.set_item("blow_up_step", ens.blow_up.as_ref().map(|r| r.step))?;
    Ok(d)
}

fn cost_dict<'py>(py: Python<'py>, c: &cost::CostEstimate) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("theta", c.theta)?;
    d.set_item("j_theta", c.j_theta)?;
    d.set_item("psi_theta", c.psi_theta)?;
    d.set_item("mean_psi_t", c.mean_psi_t)?;
    d.set_item("var_psi_t", c.var_psi_t)?;
    d.set_item("std_error", c.std_error)?;
    d.set_item("n_samples", c.n_samples)?;
    Ok(d)
}

/// Monte Carlo exponential cost of the optimal control shifted by `epsilon`.
#[pyfunction]
#[pyo3(signature = (params, n_steps, n_paths, seed, epsilon=0.0))]
fn estimate_cost<'py>(
    py: Python<'py>,
    params: PyRef<'_, PyLqParams>,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    epsilon: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = params.inner;
    let c = py
        .detach(|| {
            let grid = TimeGrid::new(p.t_end, n_steps)?;
            let ricc = riccati::RiccatiSolution::new(
                p,
                GammaChoice::SigmaBeta,
                FormulaVariant::DerivedOde,
            )?;
            let control = lq_optimal_control(&ricc, &grid)?.perturbed(epsilon);
            cost::estimate_cost(&lq_coefficients(&p), &control, &p, grid, n_paths, seed)
        })
        .map_err(to_py)?;
    cost_dict(py, &c)
}

/// Gap between the exponential cost and its second-order expansion, per theta.
#[pyfunction]
fn expansion_check<'py>(
    py: Python<'py>,
    params: PyRef<'_, PyLqParams>,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    thetas: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let p = params.inner;
    let report = py
        .detach(|| {
            let grid = TimeGrid::new(p.t_end, n_steps)?;
            let ricc = riccati::RiccatiSolution::new(
                p,
                GammaChoice::SigmaBeta,
                FormulaVariant::DerivedOde,
            )?;
            let control = lq_optimal_control(&ricc, &grid)?;
            cost::expansion_check(
                &lq_coefficients(&p),
                &control,
                &p,
                grid,
                n_paths,
                seed,
                &thetas,
            )
        })
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item(
        "thetas",
        report.rows.iter().map(|r| r.theta).collect::<Vec<_>>(),
    )?;
    d.set_item(
        "gaps",
        report.rows.iter().map(|r| r.gap).collect::<Vec<_>>(),
    )?;
    d.set_item(
        "psi_theta",
        report.rows.iter().map(|r| r.psi_theta).collect::<Vec<_>>(),
    )?;
    d.set_item("ratios", report.ratios)?;
    Ok(d)
}

/// Largest left-hand side of the variational inequality along the optimal
/// control (shifted by `epsilon`) over a control grid.
#[pyfunction]
#[pyo3(signature = (params, n_steps, n_paths, seed, epsilon=0.0, u_start=-5.0, u_stop=5.0, u_step=0.1, tolerance=1e-8))]
#[allow(clippy::too_many_arguments)]
fn check_variational_inequality<'py>(
    py: Python<'py>,
    params: PyRef<'_, PyLqParams>,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    epsilon: f64,
    u_start: f64,
    u_stop: f64,
    u_step: f64,
    tolerance: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = params.inner;
    let report = py
        .detach(|| {
            let grid = TimeGrid::new(p.t_end, n_steps)?;
            let us = control_range(u_start, u_stop, u_step)?;
            let coeffs = lq_coefficients(&p);
            let ricc = riccati::RiccatiSolution::new(
                p,
                GammaChoice::SigmaBeta,
                FormulaVariant::DerivedOde,
            )?;
            let gains = GainTable::new(&ricc, &grid)?;
            let control = lq_optimal_control(&ricc, &grid)?.perturbed(epsilon);
            let ens = simulate_state(&coeffs, &control, p.x0, grid, n_paths, seed)?;
            let panel = simulate_martingales(&coeffs, &ens, &|t| gains.gamma(t), p.theta)?;
            let adj = build_lq_adjoint(&p, &ricc, &ens, &panel)?;
            cost::check_variational_inequality(&coeffs, &adj, &ens, &panel, p.theta, &us, tolerance)
        })
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("max_violation", report.max_violation)?;
    d.set_item("violating_fraction", report.violating_fraction)?;
    d.set_item("n_paths_checked", report.n_paths_checked)?;
    d.set_item("tolerance", report.tolerance)?;
    Ok(d)
}

/// Runs a configuration document; returns the manifest as JSON text.
#[pyfunction]
#[pyo3(signature = (config_text, out_dir=None, paper_exact=false))]
fn run(
    py: Python<'_>,
    config_text: &str,
    out_dir: Option<std::path::PathBuf>,
    paper_exact: bool,
) -> PyResult<String> {
    let cfg = parse_config(config_text).map_err(|e| PyValueError::new_err(e.0))?;
    let options = RunOptions {
        dry: out_dir.is_none(),
        out: out_dir,
        paper_exact,
    };
    let manifest = py
        .detach(|| runner::run(&cfg, &options))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    serde_json::to_string(&manifest).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn rsmfc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BlowUpError", m.py().get_type::<BlowUpError>())?;
    m.add_class::<PyLqParams>()?;
    m.add_class::<PyRiccati>()?;
    m.add_function(wrap_pyfunction!(blow_up_time, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_closed_loop, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_cost, m)?)?;
    m.add_function(wrap_pyfunction!(expansion_check, m)?)?;
    m.add_function(wrap_pyfunction!(check_variational_inequality, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
