//! Python bindings: cost functions, closed-form indices, the decoupled MDP
//! oracle and the multi-user simulator.

use std::sync::Arc;

use aoi_whittle::oracle::{self, CostTiming, DecoupledMdp, JointMdp};
use aoi_whittle::policies::{PolicyKind, PolicyOptions};
use aoi_whittle::sim::{self, SimConfig};
use aoi_whittle::{CostFunction, IndexCalculator, SeriesContext, UeConfig, UeState};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Non-decreasing cost of AoI `v(h)`.
#[pyclass(name = "Cost", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyCost(CostFunction);

#[pymethods]
impl PyCost {
    #[staticmethod]
    fn linear() -> Self {
        PyCost(CostFunction::linear())
    }

    #[staticmethod]
    fn step(threshold: u64) -> PyResult<Self> {
        let c = CostFunction::step(threshold);
        c.check().map_err(value_err)?;
        Ok(PyCost(c))
    }

    #[staticmethod]
    #[pyo3(signature = (degree, coefficient = 1.0))]
    fn polynomial(degree: u32, coefficient: f64) -> PyResult<Self> {
        let c = CostFunction::polynomial(degree, coefficient);
        c.check().map_err(value_err)?;
        Ok(PyCost(c))
    }

    #[staticmethod]
    fn constant(value: f64) -> PyResult<Self> {
        let c = CostFunction::constant(value);
        c.check().map_err(value_err)?;
        Ok(PyCost(c))
    }

    fn __call__(&self, h: u64) -> f64 {
        self.0.evaluate(h)
    }

    fn __repr__(&self) -> String {
        format!("Cost({:?})", self.0)
    }
}

/// Closed-form Whittle index and series kernel for one user class.
#[pyclass(name = "IndexCalculator", frozen)]
struct PyIndexCalculator(IndexCalculator);

#[pymethods]
impl PyIndexCalculator {
    #[new]
    #[pyo3(signature = (lam, eps, cost, offset = 0))]
    fn new(lam: f64, eps: f64, cost: PyCost, offset: u64) -> PyResult<Self> {
        let ctx = SeriesContext::new(lam, eps, cost.0).map_err(value_err)?.with_offset(offset);
        Ok(PyIndexCalculator(IndexCalculator::from_context(ctx)))
    }

    fn index(&self, a: u64, d: u64) -> PyResult<f64> {
        self.0.index_value(UeState { a, d }).map_err(value_err)
    }

    fn solve_d1(&self, a: u64, d: u64) -> PyResult<u64> {
        self.0.solve_d1(a, d).map_err(value_err)
    }

    fn theta(&self, h: u64) -> f64 {
        self.0.context().theta(h)
    }

    fn psi(&self, h: u64) -> f64 {
        self.0.context().psi(h)
    }

    fn omega(&self, h: u64) -> f64 {
        self.0.context().omega(h)
    }
}

#[pyfunction]
#[pyo3(signature = (lam, eps, cost, a, d))]
fn whittle_index(lam: f64, eps: f64, cost: PyCost, a: u64, d: u64) -> PyResult<f64> {
    aoi_whittle::whittle::whittle_index(lam, eps, cost.0, UeState { a, d })
        .map(|v| v.value)
        .map_err(value_err)
}

fn timing(name: &str) -> PyResult<CostTiming> {
    match name {
        "after_transmission" => Ok(CostTiming::AfterTransmission),
        "start_of_slot" => Ok(CostTiming::StartOfSlot),
        other => Err(PyValueError::new_err(format!(
            "timing must be 'after_transmission' or 'start_of_slot', got {other:?}"
        ))),
    }
}

fn mdp(lam: f64, eps: f64, cost: PyCost, charge: f64, caps: u64, t: &str) -> PyResult<DecoupledMdp> {
    Ok(DecoupledMdp::new(lam, eps, cost.0, charge)
        .with_caps(caps, caps)
        .with_timing(timing(t)?))
}

/// Converged relative values of the single-user problem at one charge.
#[pyclass(name = "ValueTable", frozen)]
struct PyValueTable(Arc<oracle::ValueTable>);

#[pymethods]
impl PyValueTable {
    #[getter]
    fn gain(&self) -> f64 {
        self.0.gain
    }

    #[getter]
    fn caps(&self) -> (u64, u64) {
        (self.0.a_max, self.0.d_max)
    }

    fn value(&self, a: u64, d: u64) -> PyResult<f64> {
        self.check(a, d)?;
        Ok(self.0.value(a, d))
    }

    fn schedules(&self, a: u64, d: u64) -> PyResult<bool> {
        self.check(a, d)?;
        Ok(self.0.schedules(a, d))
    }

    /// Per `a`, the smallest scheduled `d`, or `None`.
    fn thresholds(&self) -> Vec<Option<u64>> {
        self.0.thresholds()
    }
}

impl PyValueTable {
    fn check(&self, a: u64, d: u64) -> PyResult<()> {
        if a == 0 || a > self.0.a_max || d > self.0.d_max {
            return Err(PyValueError::new_err(format!("state ({a}, {d}) outside the table")));
        }
        Ok(())
    }
}

#[pyfunction]
#[pyo3(signature = (lam, eps, cost, charge, caps = 64, timing = "after_transmission"))]
fn rvi_solve(py: Python<'_>, lam: f64, eps: f64, cost: PyCost, charge: f64, caps: u64, timing: &str) -> PyResult<PyValueTable> {
    let m = mdp(lam, eps, cost, charge, caps, timing)?;
    let table = py.detach(|| oracle::rvi_solve(&m)).map_err(runtime_err)?;
    Ok(PyValueTable(Arc::new(table)))
}

#[pyfunction]
#[pyo3(signature = (lam, eps, cost, a, d, m_hi = 1.0, caps = 64, timing = "after_transmission"))]
#[allow(clippy::too_many_arguments)]
fn index_by_bisection(
    py: Python<'_>,
    lam: f64,
    eps: f64,
    cost: PyCost,
    a: u64,
    d: u64,
    m_hi: f64,
    caps: u64,
    timing: &str,
) -> PyResult<f64> {
    let m = mdp(lam, eps, cost, 0.0, caps, timing)?;
    py.detach(|| oracle::index_by_bisection(&m, UeState { a, d }, m_hi))
        .map_err(runtime_err)
}

fn fleet(ues: Vec<(f64, f64, PyCost)>) -> Vec<UeConfig> {
    ues.into_iter().map(|(l, e, c)| UeConfig::new(l, e, c.0)).collect()
}

/// Minimum average cost per user of a small fleet, by joint value iteration.
#[pyfunction]
#[pyo3(signature = (ues, caps = 12))]
fn joint_optimal_cost(py: Python<'_>, ues: Vec<(f64, f64, PyCost)>, caps: u64) -> PyResult<f64> {
    let m = JointMdp::new(fleet(ues), caps, caps);
    py.detach(|| oracle::joint_rvi_solve(&m))
        .map(|p| p.xi_opt)
        .map_err(runtime_err)
}

/// Simulates a fleet given as `(lambda, epsilon, cost)` tuples and returns a
/// dict with `mean_cost`, `ci_low`, `ci_high`, `per_ue_cost`, `throughput`.
#[pyfunction]
#[pyo3(signature = (ues, horizon, policy = "whittle", seed = 0, replications = 1, warmup = None, index_offset = 1, optimal_caps = 12))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    ues: Vec<(f64, f64, PyCost)>,
    horizon: u64,
    policy: &str,
    seed: u64,
    replications: u32,
    warmup: Option<u64>,
    index_offset: u64,
    optimal_caps: u64,
) -> PyResult<Py<PyAny>> {
    let kind: PolicyKind = policy.parse().map_err(value_err)?;
    let ues = fleet(ues);
    let mut cfg = SimConfig::new(ues.clone(), horizon, kind)
        .with_seed(seed)
        .with_replications(replications);
    if let Some(w) = warmup {
        cfg = cfg.with_warmup(w);
    }
    let report = py
        .detach(|| -> Result<_, String> {
            let mut options = PolicyOptions {
                index_offset,
                ..PolicyOptions::default()
            };
            if kind == PolicyKind::Optimal {
                let joint = oracle::joint_rvi_solve(&JointMdp::new(ues, optimal_caps, optimal_caps))
                    .map_err(|e| e.to_string())?;
                options.joint = Some(Arc::new(joint));
                options.clamp_to_table = true;
            }
            sim::run_named(&cfg, &options).map_err(|e| e.to_string())
        })
        .map_err(PyValueError::new_err)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("policy", &report.policy)?;
    out.set_item("mean_cost", report.mean_cost)?;
    out.set_item("ci_low", report.ci_low)?;
    out.set_item("ci_high", report.ci_high)?;
    out.set_item("replication_costs", &report.replication_costs)?;
    out.set_item("per_ue_cost", &report.per_ue_cost)?;
    out.set_item("per_ue_aoi", &report.per_ue_aoi)?;
    out.set_item("throughput", report.throughput)?;
    out.set_item("transmissions", report.transmissions)?;
    Ok(out.into_any().unbind())
}

#[pymodule]
#[pyo3(name = "aoi_whittle")]
fn aoi_whittle_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", aoi_whittle::VERSION)?;
    m.add_class::<PyCost>()?;
    m.add_class::<PyIndexCalculator>()?;
    m.add_class::<PyValueTable>()?;
    m.add_function(wrap_pyfunction!(whittle_index, m)?)?;
    m.add_function(wrap_pyfunction!(rvi_solve, m)?)?;
    m.add_function(wrap_pyfunction!(index_by_bisection, m)?)?;
    m.add_function(wrap_pyfunction!(joint_optimal_cost, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
