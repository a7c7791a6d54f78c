//! Python bindings: problem generation, the synchronous and asynchronous
//! engines, stability tests and the Monte Carlo harness.

use asyncdual::delay::{exponential_pmf as exp_pmf, joint_pmf, uniform_pmf as uni_pmf};
use asyncdual::harness::{run_experiment as run_exp, stability_survey, ExperimentConfig};
use asyncdual::stability::{bertsekas_condition, enumerate_modes as modes, iid_kronecker_test, sync_radius};
use asyncdual::trajectory::RunKind;
use asyncdual::{
    generate_random_problem, AsyncOptions, DelayDistribution, GeneratorSpec, HoldPolicy, PNorm, SeparableQpProblem,
    SyncOptions, TerminalStatus,
};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_p(p: &str) -> PyResult<PNorm> {
    p.parse().map_err(err)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn json_to_py(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn start(problem: &SeparableQpProblem, y0: Option<Vec<f64>>) -> PyResult<DVector<f64>> {
    let y0 = y0.map(DVector::from_vec).unwrap_or_else(|| DVector::zeros(problem.m()));
    if y0.len() != problem.m() {
        return Err(err(format!("y0 has length {}, expected {}", y0.len(), problem.m())));
    }
    Ok(y0)
}

fn shared(problem: &SeparableQpProblem, pmf: Vec<f64>) -> PyResult<DelayDistribution> {
    DelayDistribution::iid_shared(pmf, problem.n_blocks()).map_err(err)
}

/// Separable equality-constrained QP with one block per node.
#[pyclass(name = "Problem", module = "asyncdual_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyProblem(SeparableQpProblem);

#[pymethods]
impl PyProblem {
    #[staticmethod]
    #[pyo3(signature = (seed, n_blocks, n, m, alpha, conditioning = 100.0))]
    fn generate(seed: u64, n_blocks: usize, n: usize, m: usize, alpha: f64, conditioning: f64) -> PyResult<Self> {
        let spec = GeneratorSpec {
            n_blocks,
            n,
            m,
            alpha,
            conditioning,
        };
        generate_random_problem(seed, spec).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        SeparableQpProblem::from_json(text).map(Self).map_err(err)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn n_blocks(&self) -> usize {
        self.0.n_blocks()
    }

    #[getter]
    fn m(&self) -> usize {
        self.0.m()
    }

    #[getter]
    fn alphas(&self) -> Vec<f64> {
        self.0.blocks().iter().map(|b| b.alpha()).collect()
    }

    /// Extreme eigenvalues of `sum_i A_i Q_i^-1 A_i^T`.
    fn curvature_bounds(&self) -> (f64, f64) {
        self.0.curvature_bounds()
    }

    fn with_alpha(&self, alpha: f64) -> PyResult<Self> {
        self.0.with_alpha(alpha).map(Self).map_err(err)
    }

    /// Common step size giving the synchronous iteration this spectral radius.
    fn with_sync_rate(&self, rate: f64) -> PyResult<Self> {
        self.0.with_sync_rate(rate).map(Self).map_err(err)
    }

    /// Same blocks with `c_i = 0` and `b = 0`.
    fn homogeneous(&self) -> Self {
        Self(self.0.homogeneous())
    }

    fn phis(&self) -> Vec<Vec<Vec<f64>>> {
        self.0.phi_set().phis.iter().map(rows).collect()
    }

    fn bias(&self) -> Vec<f64> {
        self.0.phi_set().bias.iter().copied().collect()
    }

    fn fixed_point(&self) -> PyResult<Vec<f64>> {
        Ok(asyncdual::sync_fixed_point(&self.0).map_err(err)?.iter().copied().collect())
    }

    fn primal(&self, y: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let x = self.0.primal_from_dual(&DVector::from_vec(y)).map_err(err)?;
        Ok(x.iter().map(|v| v.iter().copied().collect()).collect())
    }

    fn bertsekas_rho(&self) -> PyResult<f64> {
        bertsekas_condition(&self.0.phi_set()).map_err(err)
    }

    fn sync_rho(&self) -> PyResult<f64> {
        sync_radius(&self.0.phi_set()).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Problem(n_blocks={}, m={})", self.0.n_blocks(), self.0.m())
    }
}

/// Iterates of one run plus its terminal status.
#[pyclass(name = "Trajectory", module = "asyncdual_py", frozen)]
struct PyTrajectory(asyncdual::Trajectory);

#[pymethods]
impl PyTrajectory {
    #[getter]
    fn kind(&self) -> &'static str {
        match self.0.kind {
            RunKind::Sync => "sync",
            RunKind::Async => "async",
        }
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.0.iterations()
    }

    #[getter]
    fn holds(&self) -> usize {
        self.0.holds()
    }

    #[getter]
    fn status(&self) -> String {
        self.0.terminal_status.to_string()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.0.terminal_status == TerminalStatus::Converged
    }

    #[getter]
    fn y0(&self) -> Vec<f64> {
        self.0.y0.clone()
    }

    #[getter]
    fn final_y(&self) -> Vec<f64> {
        self.0.final_y().to_vec()
    }

    /// `y^1 .. y^K`.
    fn iterates(&self) -> Vec<Vec<f64>> {
        self.0.records.iter().map(|r| r.y.clone()).collect()
    }

    fn residuals(&self) -> Vec<f64> {
        self.0.records.iter().map(|r| r.residual).collect()
    }

    /// Per-step gate condition values; empty for synchronous runs.
    fn condition_values(&self) -> Vec<f64> {
        self.0.records.iter().filter_map(|r| r.info.as_ref().map(|i| i.condition_value)).collect()
    }

    fn to_csv(&self) -> String {
        self.0.to_csv()
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    fn __len__(&self) -> usize {
        self.0.iterations()
    }

    fn __repr__(&self) -> String {
        format!(
            "Trajectory(kind={}, iterations={}, status={})",
            self.kind(),
            self.0.iterations(),
            self.0.terminal_status
        )
    }
}

#[pyfunction]
fn exponential_pmf(q: usize, rate: f64) -> PyResult<Vec<f64>> {
    exp_pmf(q, rate).map_err(err)
}

#[pyfunction]
fn uniform_pmf(q: usize) -> Vec<f64> {
    uni_pmf(q)
}

#[pyfunction]
#[pyo3(signature = (problem, y0 = None, epsilon = 1e-10, max_iter = 100_000, p = "2", allow_divergence = false))]
fn run_sync(
    py: Python<'_>,
    problem: &PyProblem,
    y0: Option<Vec<f64>>,
    epsilon: f64,
    max_iter: usize,
    p: &str,
    allow_divergence: bool,
) -> PyResult<PyTrajectory> {
    let y0 = start(&problem.0, y0)?;
    let opts = SyncOptions {
        epsilon,
        max_iter,
        p: parse_p(p)?,
        allow_divergence,
    };
    py.detach(|| asyncdual::run_sync(&problem.0, &y0, &opts)).map(PyTrajectory).map_err(err)
}

/// Asynchronous run with every node drawing staleness from `pmf`.
#[pyfunction]
#[pyo3(signature = (
    problem, pmf, y0 = None, epsilon = 1e-10, max_iter = 100_000, gate = true, p = "2", seed = 0,
    hold_policy = "freshen", max_consecutive_holds = None
))]
#[allow(clippy::too_many_arguments)]
fn run_async(
    py: Python<'_>,
    problem: &PyProblem,
    pmf: Vec<f64>,
    y0: Option<Vec<f64>>,
    epsilon: f64,
    max_iter: usize,
    gate: bool,
    p: &str,
    seed: u64,
    hold_policy: &str,
    max_consecutive_holds: Option<usize>,
) -> PyResult<PyTrajectory> {
    let y0 = start(&problem.0, y0)?;
    let dist = shared(&problem.0, pmf)?;
    let hold_policy = match hold_policy {
        "freshen" => HoldPolicy::Freshen,
        "freeze" => HoldPolicy::Freeze,
        other => return Err(err(format!("hold_policy must be freshen or freeze (got {other:?})"))),
    };
    let opts = AsyncOptions {
        epsilon,
        max_iter,
        gate_enabled: gate,
        p: parse_p(p)?,
        seed,
        hold_policy,
        max_consecutive_holds,
    };
    py.detach(|| asyncdual::run_async(&problem.0, &dist, &y0, &opts)).map(PyTrajectory).map_err(err)
}

/// Stability report as a dict.
#[pyfunction]
#[pyo3(signature = (problem, pmf, samples = 1000, p = "2", seed = 0))]
fn survey(py: Python<'_>, problem: &PyProblem, pmf: Vec<f64>, samples: usize, p: &str, seed: u64) -> PyResult<Py<PyAny>> {
    let dist = shared(&problem.0, pmf)?;
    let p = parse_p(p)?;
    let report = py.detach(|| stability_survey(&problem.0, &dist, samples, p, seed)).map_err(err)?;
    json_to_py(py, &serde_json::to_string(&report).map_err(err)?)
}

/// All `q^N` companion matrices, node 1 as the most significant digit.
#[pyfunction]
fn enumerate_modes(problem: &PyProblem, q: usize) -> PyResult<Vec<Vec<Vec<f64>>>> {
    Ok(modes(&problem.0.phi_set(), q).map_err(err)?.iter().map(rows).collect())
}

/// `ρ(sum_s p_s W_s ⊗ W_s)` for i.i.d. modes under the shared `pmf`.
#[pyfunction]
fn mean_square_rho(problem: &PyProblem, pmf: Vec<f64>) -> PyResult<f64> {
    let q = pmf.len();
    let ws = modes(&problem.0.phi_set(), q).map_err(err)?;
    let joint = joint_pmf(&shared(&problem.0, pmf)?, asyncdual::stability::ENUMERATION_LIMIT).map_err(err)?;
    iid_kronecker_test(&ws, &joint).map_err(err)
}

/// Runs the Monte Carlo harness from a JSON config and returns the summary
/// dict.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<Py<PyAny>> {
    let config = ExperimentConfig::from_json(config_json).map_err(err)?;
    let out = py.detach(|| run_exp(&config)).map_err(err)?;
    json_to_py(py, &serde_json::to_string(&out.summary).map_err(err)?)
}

#[pymodule]
fn asyncdual_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblem>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_function(wrap_pyfunction!(exponential_pmf, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_pmf, m)?)?;
    m.add_function(wrap_pyfunction!(run_sync, m)?)?;
    m.add_function(wrap_pyfunction!(run_async, m)?)?;
    m.add_function(wrap_pyfunction!(survey, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_modes, m)?)?;
    m.add_function(wrap_pyfunction!(mean_square_rho, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
