//! Python bindings: embedding network, feature dictionary, the two losses,
//! retrieval metrics and the training loop.
//!
//! Vectors cross the boundary as lists of floats, matrices as lists of rows.
//! Labels are integers: `0` background, `-1` unlabeled, `c > 0` identity `c`.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use inet_core::checkpoint;
use inet_core::dictionary::NegativeSet;
use inet_core::experiments;
use inet_core::hep::{self, HepBatch};
use inet_core::olp::{self, ProposalRef};
use inet_core::{
    ClassifierHead, DenseMatrix, EmbeddingConfig, Error, EvalReport, FeatureDictionary, IdentityLabel, OlpBatch,
    RunConfig, SelectionPool, Subgroup, TrainState,
};

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        e @ (Error::NonFinite { .. } | Error::NonFiniteFunction { .. }) => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn label_from(v: i64) -> PyResult<IdentityLabel> {
    match v {
        0 => Ok(IdentityLabel::Background),
        -1 => Ok(IdentityLabel::Unlabeled),
        c if c > 0 && c <= u32::MAX as i64 => Ok(IdentityLabel::Id(c as u32)),
        _ => Err(PyValueError::new_err(format!("invalid label {v}"))),
    }
}

fn label_to(l: IdentityLabel) -> i64 {
    match l {
        IdentityLabel::Background => 0,
        IdentityLabel::Unlabeled => -1,
        IdentityLabel::Id(c) => c as i64,
    }
}

fn matrix(rows: &[Vec<f64>], cols: usize) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(rows, cols).map_err(to_py)
}

fn matrix_auto(rows: &[Vec<f64>]) -> PyResult<DenseMatrix> {
    let cols = rows.first().map(Vec::len).ok_or_else(|| PyValueError::new_err("empty matrix"))?;
    matrix(rows, cols)
}

fn rows_of(m: &DenseMatrix) -> Vec<Vec<f64>> {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("gallery_size", r.gallery_size)?;
    d.set_item("num_queries", r.num_queries)?;
    d.set_item("top1", r.top1)?;
    d.set_item("top5", r.top5)?;
    d.set_item("top10", r.top10)?;
    d.set_item("map", r.mean_ap)?;
    d.set_item("per_query_ap", r.per_query_ap.clone())?;
    Ok(d)
}

#[pyclass(name = "EmbeddingNetwork", module = "inet")]
struct PyEmbeddingNetwork {
    inner: inet_core::EmbeddingNetwork,
}

#[pymethods]
impl PyEmbeddingNetwork {
    #[new]
    #[pyo3(signature = (input_dim, hidden_dims, embed_dim, init_gain = 0.3, seed = 0))]
    fn new(input_dim: usize, hidden_dims: Vec<usize>, embed_dim: usize, init_gain: f64, seed: u64) -> PyResult<Self> {
        let cfg = EmbeddingConfig { input_dim, hidden_dims, embed_dim, init_gain, ..Default::default() };
        let mut rng = inet_core::train::stream_rng(seed, inet_core::train::Stream::Init);
        Ok(Self { inner: inet_core::EmbeddingNetwork::new(cfg, &mut rng).map_err(to_py)? })
    }

    /// Loads a checkpoint written by `save` or by the training command.
    #[staticmethod]
    #[pyo3(signature = (path, input_dim, hidden_dims, embed_dim))]
    fn load(path: PathBuf, input_dim: usize, hidden_dims: Vec<usize>, embed_dim: usize) -> PyResult<Self> {
        let cfg = EmbeddingConfig { input_dim, hidden_dims, embed_dim, ..Default::default() };
        Ok(Self { inner: checkpoint::load_network(&path, &cfg).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_network(&self.inner, &path).map_err(to_py)
    }

    /// Unit-norm embeddings, one row per input row.
    fn embed(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(&inputs, self.inner.config().input_dim)?;
        Ok(rows_of(&self.inner.embed(&x).map_err(to_py)?))
    }

    fn parameters(&self) -> Vec<f64> {
        self.inner.parameters()
    }

    fn set_parameters(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.inner.set_parameters(&params).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn __repr__(&self) -> String {
        format!("EmbeddingNetwork(widths={:?})", self.inner.config().widths())
    }
}

#[pyclass(name = "FeatureDictionary", module = "inet")]
struct PyFeatureDictionary {
    inner: FeatureDictionary,
}

#[pymethods]
impl PyFeatureDictionary {
    #[new]
    fn new(capacity: usize) -> PyResult<Self> {
        Ok(Self { inner: FeatureDictionary::new(capacity).map_err(to_py)? })
    }

    /// Inserts a unit feature; returns its insertion counter.
    fn insert(&mut self, feature: Vec<f64>, label: i64) -> PyResult<u64> {
        self.inner.insert(&feature, label_from(label)?).map_err(to_py)
    }

    /// `(feature, label)` pairs not labeled with `anchor_id`, oldest first.
    fn negatives_for(&self, anchor_id: u32) -> Vec<(Vec<f64>, i64)> {
        self.inner.negatives_for(anchor_id).into_iter().map(|(f, l)| (f.to_vec(), label_to(l))).collect()
    }

    /// `(insertion_counter, label)` of every entry, oldest first.
    fn entries(&self) -> Vec<(u64, i64)> {
        self.inner.iter().map(|e| (e.insertion_counter, label_to(e.label))).collect()
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.inner.capacity()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn subgroup(anchor: Vec<f64>, positive: Vec<f64>, negatives: &[Vec<f64>]) -> PyResult<Subgroup> {
    let dim = anchor.len();
    Ok(Subgroup {
        anchor,
        positive,
        negatives: Arc::new(NegativeSet {
            features: matrix(negatives, dim)?,
            labels: vec![IdentityLabel::Background; negatives.len()],
        }),
        anchor_identity: 0,
        anchor_source: None::<ProposalRef>,
    })
}

/// OLP loss of one subgroup (unit vectors, dot-product similarity).
#[pyfunction]
fn olp_loss(anchor: Vec<f64>, positive: Vec<f64>, negatives: Vec<Vec<f64>>) -> PyResult<f64> {
    let batch = OlpBatch { subgroups: vec![subgroup(anchor, positive, &negatives)?] };
    olp::olp_loss(&batch).map_err(to_py)
}

/// `(loss, anchor_gradient, q, q_hat)` for one subgroup.
#[pyfunction]
fn olp_gradient(
    anchor: Vec<f64>,
    positive: Vec<f64>,
    negatives: Vec<Vec<f64>>,
) -> PyResult<(f64, Vec<f64>, f64, Vec<f64>)> {
    let batch = OlpBatch { subgroups: vec![subgroup(anchor, positive, &negatives)?] };
    let mut g = olp::olp_gradient(&batch).map_err(to_py)?;
    Ok((g.loss, g.anchor_grads.remove(0), g.q[0], g.q_hat.remove(0)))
}

fn hep_inputs(
    weights: &[Vec<f64>],
    bias: Vec<f64>,
    features: &[Vec<f64>],
    true_classes: Vec<usize>,
    pool: Vec<usize>,
) -> PyResult<(ClassifierHead, HepBatch, SelectionPool)> {
    let w = matrix_auto(weights)?;
    let f = matrix(features, w.cols())?;
    Ok((ClassifierHead { weights: w, bias }, HepBatch { features: f, true_classes }, SelectionPool::from_classes(pool)))
}

/// HEP loss: mean cross-entropy with the softmax restricted to `pool`.
#[pyfunction]
fn hep_loss(
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    features: Vec<Vec<f64>>,
    true_classes: Vec<usize>,
    pool: Vec<usize>,
) -> PyResult<f64> {
    let (head, batch, pool) = hep_inputs(&weights, bias, &features, true_classes, pool)?;
    hep::hep_loss(&head, &batch, &pool).map_err(to_py)
}

/// `(loss, weight_grad, bias_grad, feature_grad)`.
#[pyfunction]
fn hep_gradient(
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    features: Vec<Vec<f64>>,
    true_classes: Vec<usize>,
    pool: Vec<usize>,
) -> PyResult<(f64, Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let (head, batch, pool) = hep_inputs(&weights, bias, &features, true_classes, pool)?;
    let g = hep::hep_gradient(&head, &batch, &pool).map_err(to_py)?;
    Ok((g.loss, rows_of(&g.head.weights), g.head.bias, rows_of(&g.features)))
}

/// Selection pool: true classes, then per-subgroup hard classes, then a
/// seeded random fill up to `num_selected`.
#[pyfunction]
#[pyo3(signature = (true_classes, negative_stats, num_selected, num_classes_total, hard_per_subgroup = 20, seed = 0))]
fn select_classes(
    true_classes: Vec<usize>,
    negative_stats: Vec<Vec<(f64, i64)>>,
    num_selected: usize,
    num_classes_total: usize,
    hard_per_subgroup: usize,
    seed: u64,
) -> PyResult<Vec<usize>> {
    let stats = negative_stats
        .into_iter()
        .map(|s| s.into_iter().map(|(d, l)| Ok((d, label_from(l)?))).collect::<PyResult<Vec<_>>>())
        .collect::<PyResult<Vec<_>>>()?;
    let cfg = hep::HepConfig { num_selected, hard_per_subgroup, num_classes_total };
    cfg.validate().map_err(to_py)?;
    let mut rng = inet_core::train::stream_rng(seed, inet_core::train::Stream::Selection);
    Ok(hep::select_classes(&true_classes, &stats, &cfg, &mut rng).classes().to_vec())
}

/// CMC top-1/5/10 and mAP of queries against a gallery.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    query_features: Vec<Vec<f64>>,
    query_ids: Vec<u32>,
    gallery_features: Vec<Vec<f64>>,
    gallery_ids: Vec<u32>,
) -> PyResult<Bound<'py, PyDict>> {
    let q = matrix_auto(&query_features)?;
    let g = matrix(&gallery_features, q.cols())?;
    let r = inet_core::evaluate(&q, &query_ids, &g, &gallery_ids).map_err(to_py)?;
    report_dict(py, &r)
}

fn parse_config(config_json: Option<&str>, seed: u64) -> PyResult<RunConfig> {
    let mut cfg = match config_json {
        Some(text) => RunConfig::from_json(text).map_err(to_py)?,
        None => RunConfig::default(),
    };
    cfg.seed = Some(seed);
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Step-by-step access to the training loop.
#[pyclass(name = "Trainer", module = "inet")]
struct PyTrainer {
    state: TrainState,
}

#[pymethods]
impl PyTrainer {
    /// `config_json` is a flat JSON run configuration (defaults if omitted).
    #[new]
    #[pyo3(signature = (seed, config_json = None))]
    fn new(seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        Ok(Self { state: TrainState::new(parse_config(config_json, seed)?).map_err(to_py)? })
    }

    /// Runs one iteration and returns its metrics row.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let row = inet_core::train_iteration(&mut self.state).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("iteration", row.iteration)?;
        d.set_item("lr", row.lr)?;
        d.set_item("olp_loss", row.olp_loss)?;
        d.set_item("hep_loss", row.hep_loss)?;
        d.set_item("total_loss", row.total_loss)?;
        d.set_item("dict_size", row.dict_size)?;
        d.set_item("pool_size", row.pool_size)?;
        d.set_item("subgroup_count", row.subgroup_count)?;
        Ok(d)
    }

    fn evaluate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        report_dict(py, &self.state.evaluate().map_err(to_py)?)
    }

    /// Copy of the current embedding network.
    fn network(&self) -> PyEmbeddingNetwork {
        PyEmbeddingNetwork { inner: self.state.net.clone() }
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.state.iteration
    }

    #[getter]
    fn done(&self) -> bool {
        self.state.is_done()
    }
}

/// Full training run writing the same files as `inet train`; returns the
/// final evaluation.
#[pyfunction]
#[pyo3(signature = (out_dir, seed, config_json = None))]
fn train<'py>(py: Python<'py>, out_dir: PathBuf, seed: u64, config_json: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = parse_config(config_json, seed)?;
    let outcome = py.detach(|| experiments::cmd_train(&cfg, &out_dir, false)).map_err(to_py)?;
    report_dict(py, &outcome.final_eval)
}

#[pymodule]
fn inet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEmbeddingNetwork>()?;
    m.add_class::<PyFeatureDictionary>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(olp_loss, m)?)?;
    m.add_function(wrap_pyfunction!(olp_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(hep_loss, m)?)?;
    m.add_function(wrap_pyfunction!(hep_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(select_classes, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
