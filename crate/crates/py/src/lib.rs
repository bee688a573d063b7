//! Python bindings. Tensors cross the boundary as nested lists of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ecgformer::data::{self, NormStats, Normalization, CLASS_NAMES, NUM_CLASSES};
use ecgformer::metrics;
use ecgformer::pipeline;
use ecgformer::train::{self, AdamHyper, Preprocessing, TrainConfig};
use ecgformer::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingInput(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<ecgformer::Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("expected at least one row"));
    }
    ecgformer::Tensor::from_rows(&rows).map_err(py_err)
}

fn rows_of(t: &ecgformer::Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.last_dim()).map(<[f64]>::to_vec).collect()
}

#[pyclass(name = "ModelConfig", module = "ecgformer_py", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: ecgformer::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    /// Reference architecture, with keyword overrides for any field.
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = ecgformer::ModelConfig::default();
        apply_overrides(&mut inner, overrides)?;
        Ok(Self { inner })
    }

    /// The small verification model.
    #[staticmethod]
    #[pyo3(signature = (**overrides))]
    fn tiny(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = ecgformer::ModelConfig::tiny();
        apply_overrides(&mut inner, overrides)?;
        Ok(Self { inner })
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    #[getter]
    fn tokens(&self) -> usize {
        self.inner.tokens()
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model
    }

    #[getter]
    fn heads(&self) -> usize {
        self.inner.heads
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn positional(&self) -> &'static str {
        self.inner.positional.as_str()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (k, v) in self.inner.to_kv() {
            d.set_item(k, v)?;
        }
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let fields: Vec<String> = self.inner.to_kv().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("ModelConfig({})", fields.join(", "))
    }
}

fn apply_overrides(cfg: &mut ecgformer::ModelConfig, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<()> {
    let Some(d) = overrides else { return Ok(()) };
    for (k, v) in d.iter() {
        let key: String = k.extract()?;
        let value = match v.extract::<Vec<usize>>() {
            Ok(list) => list.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            Err(_) => v.str()?.to_string(),
        };
        match cfg.set(&key, &value) {
            Ok(true) => {}
            Ok(false) => return Err(PyValueError::new_err(format!("unknown model key '{key}'"))),
            Err(msg) => return Err(PyValueError::new_err(msg)),
        }
    }
    Ok(())
}

#[pyclass(name = "Dataset", module = "ecgformer_py", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (features, labels, source = "python".to_string()))]
    fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, source: String) -> PyResult<Self> {
        let inner = data::Dataset::new(matrix(features)?, labels, source).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        rows_of(self.inner.features())
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id()
    }

    fn class_counts(&self) -> [usize; NUM_CLASSES] {
        self.inner.class_counts()
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_csv(&path).map_err(py_err)
    }
}

#[pyclass(name = "NormStats", module = "ecgformer_py", from_py_object)]
#[derive(Clone)]
struct PyNormStats {
    inner: NormStats,
}

#[pymethods]
impl PyNormStats {
    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean.data().to_vec()
    }

    #[getter]
    fn std(&self) -> Vec<f64> {
        self.inner.std.data().to_vec()
    }

    #[getter]
    fn fitted_on(&self) -> String {
        self.inner.fitted_on.clone()
    }
}

#[pyclass(name = "Model", module = "ecgformer_py")]
struct PyModel {
    inner: ecgformer::Model,
    normalization: Normalization,
    stats: Option<NormStats>,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model that expects already-normalized features.
    #[new]
    fn new(config: &PyModelConfig) -> PyResult<Self> {
        Ok(Self {
            inner: ecgformer::Model::build(&config.inner).map_err(py_err)?,
            normalization: Normalization::PerFeature,
            stats: None,
        })
    }

    /// Restores the model and its normalization from a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = train::load_checkpoint(&path).map_err(py_err)?;
        Ok(Self {
            inner: ckpt.model().map_err(py_err)?,
            normalization: ckpt.normalization,
            stats: ckpt.norm_stats,
        })
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.config().clone(),
        }
    }

    fn count_params(&self) -> usize {
        self.inner.count_params()
    }

    /// Per-component table with the signed delta from the reference count.
    fn param_report(&self) -> String {
        self.inner.param_report().to_string()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params().iter().map(|p| p.name.clone()).collect()
    }

    /// Eval-mode logits for rows of raw features; checkpoint normalization is
    /// applied first when the model was loaded from one.
    fn logits(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = self.prepare(rows)?;
        Ok(rows_of(&self.inner.logits(&x).map_err(py_err)?))
    }

    fn predict_proba(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = self.prepare(rows)?;
        Ok(rows_of(&self.inner.predict_proba(&x).map_err(py_err)?))
    }

    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let x = self.prepare(rows)?;
        Ok(self.inner.logits(&x).map_err(py_err)?.argmax_rows())
    }
}

impl PyModel {
    fn prepare(&self, rows: Vec<Vec<f64>>) -> PyResult<ecgformer::Tensor> {
        let x = matrix(rows)?;
        match (&self.stats, self.normalization) {
            (Some(s), Normalization::PerFeature) => s.apply(&x).map_err(py_err),
            (_, Normalization::PerSample) => Ok(data::standardize_rows(&x)),
            (None, Normalization::PerFeature) => Ok(x),
        }
    }
}

#[pyfunction]
fn load_csv(path: PathBuf) -> PyResult<PyDataset> {
    if !path.is_file() {
        return Err(PyFileNotFoundError::new_err(path.display().to_string()));
    }
    Ok(PyDataset {
        inner: data::load_csv(&path).map_err(py_err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (per_class, noise = 0.05, seed = 0))]
fn synthetic_beats(per_class: [usize; NUM_CLASSES], noise: f64, seed: u64) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: ecgformer::synthetic::synthetic_beats(&per_class, noise, seed).map_err(py_err)?,
    })
}

#[pyfunction]
fn stratified_subset(ds: &PyDataset, n: usize, seed: u64) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: data::stratified_subset(&ds.inner, n, seed).map_err(py_err)?,
    })
}

#[pyfunction]
fn fit_normalizer(ds: &PyDataset) -> PyResult<PyNormStats> {
    Ok(PyNormStats {
        inner: data::fit_normalizer(&ds.inner).map_err(py_err)?,
    })
}

#[pyfunction]
fn apply_normalizer(ds: &PyDataset, stats: &PyNormStats) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: data::apply_normalizer(&ds.inner, &stats.inner).map_err(py_err)?,
    })
}

#[pyfunction]
fn confusion_matrix(y_true: Vec<usize>, y_pred: Vec<usize>) -> PyResult<Vec<Vec<usize>>> {
    metrics::confusion_matrix(&y_true, &y_pred, NUM_CLASSES).map_err(py_err)
}

/// Per-class and averaged metrics as a dict; `text` holds the printable table.
#[pyfunction]
fn classification_report<'py>(py: Python<'py>, y_true: Vec<usize>, y_pred: Vec<usize>) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::classification_report(&y_true, &y_pred, &CLASS_NAMES).map_err(py_err)?;
    let out = PyDict::new(py);
    for (name, c) in r.class_names.iter().zip(&r.per_class) {
        let row = PyDict::new(py);
        row.set_item("precision", c.precision)?;
        row.set_item("recall", c.recall)?;
        row.set_item("f1", c.f1)?;
        row.set_item("support", c.support)?;
        row.set_item("zero_division", c.zero_division)?;
        out.set_item(name, row)?;
    }
    for (name, a) in [("macro avg", &r.macro_avg), ("weighted avg", &r.weighted_avg)] {
        let row = PyDict::new(py);
        row.set_item("precision", a.precision)?;
        row.set_item("recall", a.recall)?;
        row.set_item("f1", a.f1)?;
        row.set_item("support", a.support)?;
        out.set_item(name, row)?;
    }
    out.set_item("accuracy", r.accuracy)?;
    out.set_item("confusion", r.confusion.clone())?;
    out.set_item("text", r.format())?;
    Ok(out)
}

/// Finite-difference check of the tiny model; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (config = None, fault_op = None))]
fn gradcheck<'py>(py: Python<'py>, config: Option<&PyModelConfig>, fault_op: Option<String>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = match config {
        Some(c) => c.inner.clone(),
        None => ecgformer::ModelConfig {
            dropout: 0.0,
            ..ecgformer::ModelConfig::tiny()
        },
    };
    let fault = fault_op.map(|op| ecgformer::tensor::Fault { op, factor: 1.01 });
    let r = pipeline::model_grad_check(&cfg, fault, 2).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("passed", r.passed)?;
    out.set_item("max_rel_error", r.max_rel_error)?;
    out.set_item("elements_checked", r.elements_checked)?;
    out.set_item("tol", r.tol)?;
    if let Some(w) = r.worst {
        out.set_item("worst_param", w.param)?;
        out.set_item("worst_index", w.index)?;
        out.set_item("analytic", w.analytic)?;
        out.set_item("numeric", w.numeric)?;
    }
    Ok(out)
}

/// Trains on normalized datasets; returns the best model and per-epoch history.
#[pyfunction]
#[pyo3(signature = (config, train_ds, val_ds, epochs = 10, batch_size = 32, learning_rate = 1e-4, seed = 0, stats = None, checkpoint = None))]
#[allow(clippy::too_many_arguments)]
fn train_model(
    py: Python<'_>,
    config: &PyModelConfig,
    train_ds: &PyDataset,
    val_ds: &PyDataset,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
    stats: Option<&PyNormStats>,
    checkpoint: Option<PathBuf>,
) -> PyResult<(PyModel, Vec<Py<PyDict>>)> {
    let cfg = TrainConfig {
        epochs,
        batch_size,
        adam: AdamHyper {
            learning_rate,
            ..AdamHyper::default()
        },
        seed,
        ..TrainConfig::default()
    };
    let prep = Preprocessing {
        normalization: Normalization::PerFeature,
        stats: stats.map(|s| s.inner.clone()),
    };
    let (model_cfg, tr, va) = (config.inner.clone(), train_ds.inner.clone(), val_ds.inner.clone());
    let outcome = py
        .detach(|| train::train_loop(&model_cfg, &cfg, &tr, &va, &prep, checkpoint.as_deref()))
        .map_err(py_err)?;
    let history = outcome
        .history
        .epochs
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("train_loss", r.train_loss)?;
            d.set_item("val_loss", r.val_loss)?;
            d.set_item("train_acc", r.train_acc)?;
            d.set_item("val_acc", r.val_acc)?;
            Ok(d.unbind())
        })
        .collect::<PyResult<_>>()?;
    let model = PyModel {
        inner: outcome.best.model().map_err(py_err)?,
        normalization: Normalization::PerFeature,
        // inputs were normalized by the caller
        stats: None,
    };
    Ok((model, history))
}

#[pymodule]
fn ecgformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNormStats>()?;
    m.add_function(wrap_pyfunction!(load_csv, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_beats, m)?)?;
    m.add_function(wrap_pyfunction!(stratified_subset, m)?)?;
    m.add_function(wrap_pyfunction!(fit_normalizer, m)?)?;
    m.add_function(wrap_pyfunction!(apply_normalizer, m)?)?;
    m.add_function(wrap_pyfunction!(confusion_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(classification_report, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add("CLASS_NAMES", CLASS_NAMES.to_vec())?;
    m.add("REFERENCE_PARAM_COUNT", ecgformer::model::REFERENCE_PARAM_COUNT)?;
    Ok(())
}
