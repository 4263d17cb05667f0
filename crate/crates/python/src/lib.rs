//! Python bindings: metrics, the synthetic generator, and checkpoint inference.

use std::path::PathBuf;

use candle_core::DType;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use thforge_core::data::generate_synthetic_dataset as generate;
use thforge_core::evaluation::{self, ClassMetrics};
use thforge_core::model::checkpoint::CheckpointMeta;
use thforge_core::{Error, ModelConfig, ModelState, Profile};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_)
        | Error::Input(_)
        | Error::Validation { .. }
        | Error::UndefinedMetric(_)
        | Error::CheckpointMismatch(_)
        | Error::Image(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn class_dict<'py>(py: Python<'py>, m: &ClassMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("precision", m.precision)?;
    d.set_item("recall", m.recall)?;
    d.set_item("f1", m.f1)?;
    d.set_item("support", m.support)?;
    Ok(d)
}

/// Accuracy and per-class rates at `threshold` (`score >= threshold` is an attack).
#[pyfunction]
#[pyo3(signature = (scores, labels, threshold = 0.80))]
fn classification_metrics<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    labels: Vec<u8>,
    threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let m = evaluation::classification_metrics(&scores, &labels, threshold).map_err(to_py)?;
    let d = PyDict::new(py);
    let counts = PyDict::new(py);
    counts.set_item("tp", m.counts.tp)?;
    counts.set_item("fp", m.counts.fp)?;
    counts.set_item("fn", m.counts.fn_)?;
    counts.set_item("tn", m.counts.tn)?;
    d.set_item("counts", counts)?;
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("attack", class_dict(py, &m.attack)?)?;
    d.set_item("bona_fide", class_dict(py, &m.bona_fide)?)?;
    d.set_item("macro_f1", m.macro_avg.f1)?;
    d.set_item("weighted_f1", m.weighted_avg.f1)?;
    Ok(d)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    evaluation::auc(&scores, &labels).map_err(to_py)
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    evaluation::average_precision(&scores, &labels).map_err(to_py)
}

/// `(threshold, f1)` maximizing attack F1 over the grid `0, step, 2·step, ..., 1`.
#[pyfunction]
#[pyo3(signature = (scores, labels, step = 0.01))]
fn sweep_threshold(scores: Vec<f64>, labels: Vec<u8>, step: f64) -> PyResult<(f64, f64)> {
    evaluation::sweep_threshold(&scores, &labels, step).map_err(to_py)
}

/// `(dice, iou)` of a probability mask against a binary one.
#[pyfunction]
#[pyo3(signature = (pred, gt, threshold = 0.10))]
fn mask_overlap(pred: Vec<f32>, gt: Vec<f32>, threshold: f64) -> PyResult<(f64, f64)> {
    evaluation::mask_overlap(&pred, &gt, threshold).map_err(to_py)
}

/// Writes a synthetic dataset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, n_per_cell = 1, seed = 0))]
fn generate_synthetic_dataset(out_dir: PathBuf, n_per_cell: usize, seed: u64) -> PyResult<PathBuf> {
    generate(&out_dir, n_per_cell, seed).map_err(to_py)
}

#[pyclass(frozen)]
struct Predictor {
    inner: thforge_core::Predictor,
}

#[pymethods]
impl Predictor {
    #[new]
    fn new(checkpoint: PathBuf) -> PyResult<Self> {
        let inner = thforge_core::Predictor::from_checkpoint(&checkpoint).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Randomly initialized model of the given size preset.
    #[staticmethod]
    #[pyo3(signature = (profile = "desk", seed = 0))]
    fn untrained(profile: &str, seed: u64) -> PyResult<Self> {
        let profile: Profile = profile.parse().map_err(to_py)?;
        let cfg = ModelConfig::for_profile(profile);
        let state = ModelState::new(&cfg, seed, DType::F32, (0.0, 0.0)).map_err(to_py)?;
        let inner = thforge_core::Predictor::new(state, CheckpointMeta::new(&cfg)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.input_size()
    }

    #[getter]
    fn threshold(&self) -> Option<f64> {
        self.inner.meta().det_threshold
    }

    #[getter]
    fn forward_count(&self) -> usize {
        self.inner.forward_count()
    }

    /// `(score, mask)` for an image file; the mask is a row-major list of
    /// `input_size ** 2` probabilities. Either is `None` when its head is absent.
    fn predict(&self, py: Python<'_>, path: PathBuf) -> PyResult<(Option<f64>, Option<Vec<f32>>)> {
        let bytes = std::fs::read(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        let img = thforge_core::data::decode_image(&bytes).map_err(to_py)?;
        let p = py.detach(|| self.inner.predict_image(&img)).map_err(to_py)?;
        Ok((p.score, p.mask))
    }
}

#[pymodule]
fn thforge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(classification_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(mask_overlap, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic_dataset, m)?)?;
    m.add_class::<Predictor>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
