//! Python bindings: configuration, synthetic datasets, training runs and the
//! core routing and loss operations.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use samga::checkpoint::{load_checkpoint_for, save_checkpoint, ModelState};
use samga::config::RunConfig;
use samga::data::{self, make_split, ConceptPartition, SplitPlan};
use samga::eval::{evaluate_retrieval, routing_report};
use samga::gradcheck::{self as gc, GradcheckConfig};
use samga::objectives::{self, ContrastiveHead, LambdaShape, MmdConfig, StageSchedule};
use samga::target::{self, Router};
use samga::trainer::{self, model_dims, Progress};
use samga::Error;

/// `(epoch, stage, lambda, lr, loss_total, val_top1)`.
type EpochRow = (usize, u8, f64, f64, f64, Option<f64>);
/// `(block, max_rel_error, status)`.
type BlockRow = (String, f64, String);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::Dimension { .. } | Error::Split(_) | Error::Numeric(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::UnknownVariant { .. } => PyKeyError::new_err(e.to_string()),
        Error::Io { .. } | Error::Format { .. } | Error::Truncated { .. } | Error::Checkpoint { .. } => {
            PyIOError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Run configuration. Keys use dotted paths such as `train.lr`.
#[pyclass(name = "Config", module = "samga_py", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        PyConfig {
            inner: RunConfig::default(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        RunConfig::from_json_str(text).map(|inner| PyConfig { inner }).map_err(to_py)
    }

    /// Overrides one key; `value` is parsed as JSON, falling back to a string.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, split={:?})", self.inner.seed, self.inner.train.split_mode)
    }
}

#[pyclass(name = "Dataset", module = "samga_py")]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (config=None, seed=0))]
    fn generate(config: Option<&PyConfig>, seed: u64) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner.data.clone()).unwrap_or_default();
        data::generate_synthetic(&cfg, seed).map(|inner| PyDataset { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        data::load_dataset(&path).map(|inner| PyDataset { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_dataset(&self.inner, &path).map(|_| ()).map_err(to_py)
    }

    #[getter]
    fn subjects(&self) -> usize {
        self.inner.manifest.subjects
    }

    #[getter]
    fn concepts(&self) -> usize {
        self.inner.manifest.concepts
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.manifest.num_layers()
    }

    #[getter]
    fn num_trials(&self) -> usize {
        self.inner.trials.len()
    }

    /// Planted global layer weights, if the dataset is synthetic.
    fn planted_weights(&self) -> Option<Vec<f64>> {
        self.inner.manifest.planted_truth.as_ref().map(|p| p.global_weights())
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(subjects={}, concepts={}, trials={}, layers={})",
            self.subjects(),
            self.concepts(),
            self.num_trials(),
            self.num_layers()
        )
    }
}

/// A finished training run: the best-validation state plus its history.
#[pyclass(name = "Run", module = "samga_py")]
struct PyRun {
    config: RunConfig,
    plan: SplitPlan,
    best: ModelState,
    progress: Progress,
}

#[pymethods]
impl PyRun {
    /// Top-k accuracies on the test split, keyed by k.
    #[pyo3(signature = (dataset, k_list=vec![1, 5]))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, k_list: Vec<usize>) -> PyResult<Bound<'py, PyDict>> {
        let res = evaluate_retrieval(&self.best.model, &dataset.inner, &self.plan.test, &k_list).map_err(to_py)?;
        let out = PyDict::new(py);
        out.set_item("n_way", res.n_way)?;
        for (k, v) in &res.topk {
            out.set_item(format!("top{k}"), v)?;
        }
        Ok(out)
    }

    /// Inference-time fusion weights over layers.
    fn global_weights(&self) -> Vec<f64> {
        self.best.model.inference_weights()
    }

    /// Per-subject routing deviation rows.
    fn deviation(&self) -> Vec<Vec<f64>> {
        let m = target::routing_deviation(&self.best.model.router);
        (0..m.rows).map(|s| m.row(s).to_vec()).collect()
    }

    /// Routing recovery against the dataset's planted truth.
    fn routing<'py>(&self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
        let r = routing_report(&self.best.model, &dataset.inner.manifest);
        let out = PyDict::new(py);
        out.set_item("learned_argmax", r.learned_argmax)?;
        out.set_item("planted_argmax", r.planted_argmax)?;
        out.set_item("argmax_match", r.argmax_match)?;
        out.set_item("mean_spearman", r.mean_spearman)?;
        Ok(out)
    }

    /// `(epoch, stage, lambda, lr, loss_total, val_top1)` per epoch.
    fn history(&self) -> Vec<EpochRow> {
        self.progress
            .history
            .iter()
            .map(|r| (r.epoch, r.stage, r.lambda, r.lr, r.loss_total, r.val_top1))
            .collect()
    }

    #[getter]
    fn best_epoch(&self) -> Option<usize> {
        self.progress.best_epoch
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.best, &path).map_err(to_py)
    }

    /// Replaces the held state with a checkpoint built for this dataset.
    fn load_state(&mut self, path: PathBuf, dataset: &PyDataset) -> PyResult<()> {
        self.best = load_checkpoint_for(&path, &model_dims(&dataset.inner)).map_err(to_py)?;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "Run(seed={}, epochs={}, best_epoch={:?})",
            self.config.seed,
            self.progress.history.len(),
            self.progress.best_epoch
        )
    }
}

/// Trains on `dataset` with the split and hyperparameters in `config`.
#[pyfunction]
#[pyo3(signature = (dataset, config=None))]
fn train(py: Python<'_>, dataset: &PyDataset, config: Option<&PyConfig>) -> PyResult<PyRun> {
    let mut cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    if cfg.train.subject.is_none() && cfg.train.split_mode != samga::config::SplitKind::Pooled {
        cfg.train.subject = Some(0);
    }
    let mode = cfg.split_mode().map_err(to_py)?;
    let partition = ConceptPartition::from_labels(&dataset.inner).map_err(to_py)?;
    let plan = make_split(&dataset.inner, mode, &partition).map_err(to_py)?;
    let data = &dataset.inner;
    let outcome = py
        .detach(|| trainer::train(data, plan.clone(), &cfg))
        .map_err(to_py)?;
    Ok(PyRun {
        config: cfg,
        plan,
        best: outcome.best,
        progress: outcome.progress,
    })
}

/// Inference routing `softmax(logits / tau)`.
#[pyfunction]
#[pyo3(signature = (logits, tau=1.0))]
fn route_infer(logits: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    let router = Router::new(logits, 1, tau, 0.0, 0.0, 1e-8).map_err(to_py)?;
    Ok(target::route_infer(&router))
}

/// Subject routing minus global routing, one row per subject.
#[pyfunction]
#[pyo3(signature = (logits, subject_bias, tau=1.0))]
fn routing_deviation(logits: Vec<f64>, subject_bias: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<Vec<f64>>> {
    let k = logits.len();
    let mut router = Router::new(logits, subject_bias.len(), tau, 0.0, 0.0, 1e-8).map_err(to_py)?;
    for (s, row) in subject_bias.iter().enumerate() {
        if row.len() != k {
            return Err(PyValueError::new_err(format!(
                "subject bias row {s} has {} entries, expected {k}",
                row.len()
            )));
        }
        router.subject_bias.row_mut(s).copy_from_slice(row);
    }
    let m = target::routing_deviation(&router);
    Ok((0..m.rows).map(|s| m.row(s).to_vec()).collect())
}

/// Symmetric contrastive loss over paired rows.
#[pyfunction]
#[pyo3(signature = (z_eeg, z_image, tau=0.07))]
fn retrieval_loss(z_eeg: Vec<Vec<f64>>, z_image: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    if !(tau > 0.0) {
        return Err(PyValueError::new_err("tau must be positive"));
    }
    objectives::retrieval_loss(&ContrastiveHead::with_tau(tau), &z_eeg, &z_image).map_err(to_py)
}

/// Multi-kernel MMD with a median bandwidth.
#[pyfunction]
#[pyo3(signature = (z_eeg, z_image, multipliers=None))]
fn mmd_loss(z_eeg: Vec<Vec<f64>>, z_image: Vec<Vec<f64>>, multipliers: Option<Vec<f64>>) -> PyResult<f64> {
    let cfg = multipliers.map(|multipliers| MmdConfig { multipliers }).unwrap_or_default();
    objectives::mmd_loss(&cfg, &z_eeg, &z_image).map_err(to_py)
}

/// Stage-one mixing weight at a 1-based epoch.
#[pyfunction]
#[pyo3(signature = (epoch, lambda0=0.5, t_c=20, epochs=30))]
fn lambda_at(epoch: usize, lambda0: f64, t_c: usize, epochs: usize) -> PyResult<f64> {
    let s = StageSchedule {
        epochs,
        t_c,
        lambda0,
        stage2_lr_multiplier: 0.1,
        shape: LambdaShape::Linear,
    };
    s.validate().map_err(to_py)?;
    Ok(objectives::lambda_at(&s, epoch))
}

/// Finite-difference check of every parameter block. `lambda_=None` checks
/// the retrieval-only objective. Returns `(passed, [(block, max_rel_error, status)])`.
#[pyfunction]
#[pyo3(signature = (lambda_=Some(0.4), seed=0))]
fn gradcheck(lambda_: Option<f64>, seed: u64) -> PyResult<(bool, Vec<BlockRow>)> {
    let report = gc::gradcheck(&GradcheckConfig {
        lambda: lambda_,
        seed,
        ..Default::default()
    })
    .map_err(to_py)?;
    let blocks = report
        .blocks
        .iter()
        .map(|b| (b.name.clone(), b.max_rel_error, format!("{:?}", b.status).to_uppercase()))
        .collect();
    Ok((report.passed(), blocks))
}

#[pymodule]
fn samga_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(route_infer, m)?)?;
    m.add_function(wrap_pyfunction!(routing_deviation, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mmd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_at, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
