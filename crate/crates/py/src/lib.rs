//! Python bindings: hypergrid environments, tabular parameters, exact
//! evaluation, the five objectives and the training loop.

use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use subgfn::exact::{self, DEFAULT_TRAJECTORY_BUDGET};
use subgfn::{
    DagEnv, EntropyCache, EntropyMode, Error, FlowParams, Hypergrid, IntervalClosure, LossKind, LossSpec,
    MetricsRow, TerminalDistribution, TrainConfig, Trajectory,
};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Budget { .. } | Error::Contract(_) | Error::Checkpoint(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::NumericalDomain(_) | Error::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        Error::Internal(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

/// D-dimensional hypergrid of side H with the corner-peaked reward.
#[pyclass(name = "Hypergrid", module = "subgfn", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyHypergrid {
    inner: Hypergrid,
}

#[pymethods]
impl PyHypergrid {
    #[new]
    #[pyo3(signature = (dim, horizon, r0 = 0.1, interval = "open"))]
    fn new(dim: usize, horizon: usize, r0: f64, interval: &str) -> PyResult<Self> {
        let closure: IntervalClosure = interval.parse().map_err(py_err)?;
        let inner = Hypergrid::with_options(dim, horizon, r0, closure, subgfn::env::DEFAULT_STATE_CAP)
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn r0(&self) -> f64 {
        self.inner.r0()
    }

    #[getter]
    fn num_states(&self) -> usize {
        self.inner.num_states()
    }

    fn index(&self, coords: Vec<usize>) -> PyResult<usize> {
        self.inner.index(&coords).map_err(py_err)
    }

    fn coords(&self, state: usize) -> PyResult<Vec<usize>> {
        self.check(state)?;
        Ok(self.inner.coords(state))
    }

    fn reward(&self, state: usize) -> PyResult<f64> {
        self.check(state)?;
        Ok(self.inner.reward(state))
    }

    /// Reward-proportional target over all states.
    fn true_distribution(&self) -> Vec<f64> {
        exact::true_distribution(&self.inner).probs().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Hypergrid(dim={}, horizon={}, r0={}, interval='{}')",
            self.inner.dim(),
            self.inner.horizon(),
            self.inner.r0(),
            self.inner.closure().as_str()
        )
    }
}

impl PyHypergrid {
    fn check(&self, state: usize) -> PyResult<()> {
        if self.inner.is_valid(state) {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!("state {state} is outside the grid")))
        }
    }
}

/// Tabular parameters bound to the grid they were built for.
#[pyclass(name = "FlowParams", module = "subgfn", skip_from_py_object)]
#[derive(Clone)]
struct PyFlowParams {
    inner: FlowParams,
    env: Hypergrid,
}

#[pymethods]
impl PyFlowParams {
    /// Uniform forward policy, zero log-flows, log Z = 0.
    #[staticmethod]
    fn zeros(env: &PyHypergrid) -> Self {
        Self {
            inner: FlowParams::zeros(&env.inner),
            env: env.inner.clone(),
        }
    }

    /// Parameters of the exact reward-matching flow under the uniform
    /// backward policy, found by enumerating every trajectory.
    #[staticmethod]
    fn optimum(env: &PyHypergrid) -> PyResult<Self> {
        let template = FlowParams::zeros(&env.inner);
        let table = exact::brute_force_flows(&env.inner, &template, DEFAULT_TRAJECTORY_BUDGET).map_err(py_err)?;
        Ok(Self {
            inner: table.to_params(&env.inner, &template),
            env: env.inner.clone(),
        })
    }

    /// Reads a checkpoint written by `save`.
    #[staticmethod]
    fn load(env: &PyHypergrid, path: std::path::PathBuf) -> PyResult<Self> {
        let file = std::fs::File::open(&path).map_err(|e| PyValueError::new_err(format!("{}: {e}", path.display())))?;
        let inner = subgfn::checkpoint::load(&env.inner, std::io::BufReader::new(file)).map_err(py_err)?;
        Ok(Self {
            inner,
            env: env.inner.clone(),
        })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        let mut buf = Vec::new();
        subgfn::checkpoint::save(&self.inner, &self.env, &mut buf)
            .and_then(|_| std::fs::write(&path, buf))
            .map_err(|e| PyValueError::new_err(format!("{}: {e}", path.display())))
    }

    #[getter]
    fn log_z(&self) -> f64 {
        self.inner.log_z()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Flat parameter vector.
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    /// Forward policy at `state`; the last entry is the stop action.
    fn forward_policy(&self, state: usize) -> PyResult<Vec<f64>> {
        if !self.env.is_valid(state) {
            return Err(PyValueError::new_err(format!("state {state} is outside the grid")));
        }
        Ok(self.inner.forward_policy(state))
    }

    /// Exact terminating distribution of rollouts from `root` (default: source).
    #[pyo3(signature = (root = None))]
    fn terminating_distribution(&self, root: Option<usize>) -> PyResult<Vec<f64>> {
        let root = root.unwrap_or(self.env.source());
        if !self.env.is_valid(root) {
            return Err(PyValueError::new_err(format!("state {root} is outside the grid")));
        }
        let dist = exact::terminating_distribution(&self.inner, &self.env, root).map_err(py_err)?;
        Ok(dist.probs().to_vec())
    }

    /// L1 distance between the exact terminating distribution and the target.
    fn l1_exact(&self) -> PyResult<f64> {
        subgfn::trainer::exact_l1(&self.inner, &self.env).map_err(py_err)
    }

    /// Exact entropy of the terminating distribution from `state`.
    fn subnet_entropy(&self, state: usize) -> PyResult<f64> {
        if !self.env.is_valid(state) {
            return Err(PyValueError::new_err(format!("state {state} is outside the grid")));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        subgfn::losses::subnet_entropy(&self.inner, &self.env, state, EntropyMode::ExactDp, &mut rng).map_err(py_err)
    }

    /// Batch objective over trajectories given as state-index lists from the
    /// source. Sub-network entropies are computed exactly for this call.
    #[pyo3(signature = (trajectories, loss = "tb", lambda_ = 0.99, delta = 1e-6))]
    fn loss(&self, trajectories: Vec<Vec<usize>>, loss: &str, lambda_: f64, delta: f64) -> PyResult<f64> {
        let kind: LossKind = loss.parse().map_err(py_err)?;
        let spec = LossSpec {
            lambda: lambda_,
            delta,
            ..LossSpec::new(kind)
        };
        spec.validate().map_err(py_err)?;
        let batch = trajectories
            .iter()
            .map(|states| Trajectory::from_states(&self.env, states))
            .collect::<subgfn::Result<Vec<_>>>()
            .map_err(py_err)?;
        let mut cache = EntropyCache::new(&self.env, 0);
        if kind == LossKind::SubGFlowNet {
            cache.refresh(&self.inner, &self.env, &batch, &spec, 0).map_err(py_err)?;
        }
        subgfn::losses::batch_loss(&self.inner, &self.env, &batch, &spec, Some(&cache)).map_err(py_err)
    }
}

/// One evaluation snapshot of a training run.
#[pyclass(name = "MetricsRow", module = "subgfn", get_all, frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMetricsRow {
    step: u64,
    loss: f64,
    l1_exact: f64,
    l1_empirical: Option<f64>,
    log_z: f64,
    mean_entropy: Option<f64>,
    modes_found: usize,
    elapsed_ms: u64,
}

impl From<&MetricsRow> for PyMetricsRow {
    fn from(r: &MetricsRow) -> Self {
        Self {
            step: r.step,
            loss: r.loss,
            l1_exact: r.l1_exact,
            l1_empirical: r.l1_empirical,
            log_z: r.log_z,
            mean_entropy: r.mean_entropy,
            modes_found: r.modes_found,
            elapsed_ms: r.elapsed_ms,
        }
    }
}

#[pymethods]
impl PyMetricsRow {
    fn __repr__(&self) -> String {
        format!(
            "MetricsRow(step={}, loss={}, l1_exact={}, log_z={})",
            self.step, self.loss, self.l1_exact, self.log_z
        )
    }
}

/// Trains on `env` and returns `(params, metrics)`.
#[pyfunction]
#[pyo3(signature = (
    env, loss = "tb", steps = 20_000, seed = 0, batch_size = 8, lr = 1e-3, lr_logz = 0.1,
    eval_every = 250, lambda_ = 0.99, delta = 1e-6, epsilon = 0.0, entropy_mode = "dp", entropy_rollouts = 64,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    env: &PyHypergrid,
    loss: &str,
    steps: u64,
    seed: u64,
    batch_size: usize,
    lr: f64,
    lr_logz: f64,
    eval_every: u64,
    lambda_: f64,
    delta: f64,
    epsilon: f64,
    entropy_mode: &str,
    entropy_rollouts: usize,
) -> PyResult<(PyFlowParams, Vec<PyMetricsRow>)> {
    let kind: LossKind = loss.parse().map_err(py_err)?;
    let entropy_mode = match entropy_mode {
        "dp" => EntropyMode::ExactDp,
        "mc" => EntropyMode::MonteCarlo {
            rollouts: entropy_rollouts,
        },
        other => return Err(PyValueError::new_err(format!("unknown entropy mode `{other}`"))),
    };
    let cfg = TrainConfig {
        steps,
        seed,
        batch_size,
        lr_policy: lr,
        lr_logz_flow: lr_logz,
        eval_every,
        epsilon,
        ..TrainConfig::new(LossSpec {
            lambda: lambda_,
            delta,
            entropy_mode,
            ..LossSpec::new(kind)
        })
    };
    let grid = env.inner.clone();
    let (params, rows) = py
        .detach(move || subgfn::train_run(grid, cfg))
        .map_err(|f| py_err(f.error))?;
    Ok((
        PyFlowParams {
            inner: params,
            env: env.inner.clone(),
        },
        rows.iter().map(PyMetricsRow::from).collect(),
    ))
}

/// Sum of absolute differences between two distributions of equal length.
#[pyfunction]
fn l1_distance(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    let p = TerminalDistribution::from_probs(p).map_err(py_err)?;
    let q = TerminalDistribution::from_probs(q).map_err(py_err)?;
    exact::l1_distance(&p, &q).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "subgfn")]
fn subgfn_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHypergrid>()?;
    m.add_class::<PyFlowParams>()?;
    m.add_class::<PyMetricsRow>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(l1_distance, m)?)?;
    m.add("LOSSES", LossKind::ALL.map(LossKind::as_str).to_vec())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
