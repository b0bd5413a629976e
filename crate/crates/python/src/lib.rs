//! Python bindings for the shardtrain core.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

use shardtrain::ckptplan::{self, CheckpointPlan};
use shardtrain::ckptstore;
use shardtrain::config;
use shardtrain::error::Error;
use shardtrain::fabric::ExecMode;
use shardtrain::fsdp;
use shardtrain::netspec::{self, RegnetConfig};
use shardtrain::optim::{self, LrSchedule};
use shardtrain::probe::{self, ProbeConfig};
use shardtrain::swav::{self, SwavConfig};
use shardtrain::tensor::Matrix;
use shardtrain::train::{Setup, TrainOptions};

fn to_py(err: Error) -> PyErr {
    let msg = err.to_string();
    match err {
        Error::InvalidConfig(_)
        | Error::InvalidArgument(_)
        | Error::InvalidPlan(_)
        | Error::Shape(_)
        | Error::Infeasible { .. } => PyValueError::new_err(msg),
        Error::Numeric(_) => PyArithmeticError::new_err(msg),
        _ => PyOSError::new_err(msg),
    }
}

/// Stage widths and depths for a width-generator parameterization.
#[pyfunction]
#[pyo3(signature = (w0, wa, wm, depth, group_width))]
fn generate_widths(w0: f64, wa: f64, wm: f64, depth: usize, group_width: usize) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let s = netspec::generate_widths(&RegnetConfig::new(w0, wa, wm, depth, group_width)).map_err(to_py)?;
    Ok((s.widths, s.depths))
}

/// Stage widths and depths of a named model such as `"rg-128gf"`.
#[pyfunction]
fn named_widths(name: &str) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let cfg = RegnetConfig::named(name).ok_or_else(|| PyValueError::new_err(format!("unknown model {name}")))?;
    let s = netspec::generate_widths(&cfg).map_err(to_py)?;
    Ok((s.widths, s.depths))
}

#[pyfunction]
fn schedule_lr(iter: u64, base_lr: f64, peak_lr: f64, final_lr: f64, warmup_iters: u64, total_iters: u64) -> PyResult<f64> {
    let s = LrSchedule {
        base_lr,
        peak_lr,
        final_lr,
        warmup_iters,
        total_iters,
    };
    optim::schedule_lr(iter, &s).map_err(to_py)
}

#[pyclass(name = "CheckpointPlan", frozen, get_all)]
struct PyPlan {
    boundaries: Vec<usize>,
    n_segments: usize,
    minimax_sum: u64,
    modeled_peak: u64,
    recompute_flops: u64,
}

#[pymethods]
impl PyPlan {
    fn __repr__(&self) -> String {
        format!(
            "CheckpointPlan(boundaries={:?}, minimax_sum={}, modeled_peak={})",
            self.boundaries, self.minimax_sum, self.modeled_peak
        )
    }
}

impl From<CheckpointPlan> for PyPlan {
    fn from(p: CheckpointPlan) -> Self {
        Self {
            boundaries: p.boundaries,
            n_segments: p.n_segments,
            minimax_sum: p.minimax_sum,
            modeled_peak: p.modeled_peak,
            recompute_flops: p.recompute_flops,
        }
    }
}

/// Checkpoint boundaries for an activation profile, from either a segment
/// count or a memory budget.
#[pyfunction]
#[pyo3(signature = (m, n_segments=None, budget=None))]
fn plan_checkpoints(m: Vec<u64>, n_segments: Option<usize>, budget: Option<u64>) -> PyResult<PyPlan> {
    let plan = match (n_segments, budget) {
        (Some(s), None) => ckptplan::plan(&m, s),
        (None, Some(b)) => ckptplan::auto_plan(&m, b),
        _ => return Err(PyValueError::new_err("give exactly one of n_segments or budget")),
    };
    plan.map(PyPlan::from).map_err(to_py)
}

/// Makespan of the two-lane gather/compute schedule.
#[pyfunction]
#[pyo3(signature = (comm, compute, prefetch=true))]
fn simulate_schedule(comm: Vec<f64>, compute: Vec<f64>, prefetch: bool) -> PyResult<f64> {
    fsdp::simulate_schedule(&comm, &compute, prefetch)
        .map(|s| s.makespan)
        .map_err(to_py)
}

/// Code matrix (`K × B`) for prototype scores given as `K` rows.
#[pyfunction]
#[pyo3(signature = (scores, epsilon=None, n_iters=None))]
fn sinkhorn(scores: Vec<Vec<f64>>, epsilon: Option<f64>, n_iters: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
    let d = SwavConfig::default();
    let s = Matrix::from_rows(&scores).map_err(to_py)?;
    let q = swav::sinkhorn(&s, epsilon.unwrap_or(d.epsilon), n_iters.unwrap_or(d.n_sinkhorn_iters))
        .map_err(to_py)?
        .q;
    Ok((0..q.rows()).map(|r| q.row(r).to_vec()).collect())
}

/// Validated run configuration; `RunConfig()` gives the toy defaults.
#[pyclass(name = "RunConfig", frozen)]
struct PyRunConfig {
    inner: config::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (json="{}"))]
    fn new(json: &str) -> PyResult<Self> {
        Ok(Self {
            inner: config::RunConfig::from_json_str(json).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| to_py(e.into()))
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    /// Feature widths from input to embedding.
    #[getter]
    fn layer_dims(&self) -> PyResult<Vec<usize>> {
        Ok(self.inner.layout().map_err(to_py)?.dims)
    }

    #[getter]
    fn world_size(&self) -> usize {
        self.inner.world_size
    }

    #[getter]
    fn total_iters(&self) -> u64 {
        self.inner.total_iters
    }
}

#[pyclass(name = "Metrics", frozen, get_all)]
struct PyMetrics {
    iter: u64,
    lr: f64,
    loss: f64,
    peak_modeled_mem: u64,
}

#[pymethods]
impl PyMetrics {
    fn __repr__(&self) -> String {
        format!("Metrics(iter={}, lr={}, loss={})", self.iter, self.lr, self.loss)
    }
}

/// Runs sharded training on the simulated fabric and returns the per-step
/// metrics; `slices_dir` receives a sliced checkpoint of the final state.
#[pyfunction(name = "train")]
#[pyo3(signature = (config, slices_dir=None))]
fn train_run(py: Python<'_>, config: &PyRunConfig, slices_dir: Option<PathBuf>) -> PyResult<Vec<PyMetrics>> {
    let cfg = &config.inner;
    let metrics = py
        .allow_threads(|| -> Result<_, Error> {
            let setup = Setup::new(cfg)?;
            let out = shardtrain::train::train(&setup, ExecMode::Sim, &TrainOptions::default(), &|_| {})?;
            if let Some(dir) = &slices_dir {
                ckptstore::save_sliced(&out.states, &setup.run_info(cfg.total_iters), dir)?;
            }
            Ok(out.metrics)
        })
        .map_err(to_py)?;
    Ok(metrics
        .into_iter()
        .map(|m| PyMetrics {
            iter: m.iter,
            lr: m.lr,
            loss: m.loss,
            peak_modeled_mem: m.peak_modeled_mem,
        })
        .collect())
}

/// Held-out top-1 accuracy of a linear probe on the frozen trunk stored in
/// `slices_dir`.
#[pyfunction]
fn linear_probe(py: Python<'_>, config: &PyRunConfig, slices_dir: PathBuf) -> PyResult<f64> {
    let cfg = &config.inner;
    py.allow_threads(|| -> Result<f64, Error> {
        let setup = Setup::new(cfg)?;
        let (state, _) = ckptstore::load_sliced(&slices_dir, 0, 1)?;
        if state.layout != setup.layout {
            return Err(Error::InvalidConfig("checkpoint layout differs from the config".into()));
        }
        let net = fsdp::consolidate(&[state])?.net;
        let features = probe::extract_features(&net, &setup.dataset.samples)?;
        Ok(probe::train_probe(&features, &setup.dataset.labels, &ProbeConfig::default())?.top1)
    })
    .map_err(to_py)
}

#[pymodule]
fn shardtrain_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_widths, m)?)?;
    m.add_function(wrap_pyfunction!(named_widths, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_lr, m)?)?;
    m.add_function(wrap_pyfunction!(plan_checkpoints, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(train_run, m)?)?;
    m.add_function(wrap_pyfunction!(linear_probe, m)?)?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyPlan>()?;
    m.add_class::<PyMetrics>()?;
    Ok(())
}
