//! Python bindings: dataset synthesis, crop windows, metrics, rollout,
//! checkpoints and the full command line.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;

use pedcross::cropper::{self, read_clip, CropConfig};
use pedcross::error::{Error, ErrorCategory};
use pedcross::evaluator::{self, PredictionRow};
use pedcross::explainer::{self, Matrix};
use pedcross::models::clip_tensor;
use pedcross::synthgen::{make_dataset_with, write_dataset, DatasetSpec};
use pedcross::trackdata::{BoundingBox, CrossingLabel};
use pedcross::trainer::{load_checkpoint, Checkpoint as CoreCheckpoint};

fn py_err(e: Error) -> PyErr {
    match (&e, e.category()) {
        (Error::Io { .. }, _) => PyOSError::new_err(e.to_string()),
        (Error::Undefined(_), _) => PyValueError::new_err(e.to_string()),
        (_, ErrorCategory::Runtime) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Serializes through JSON so nested reports arrive as plain dicts and lists.
fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn bbox(b: [f64; 4]) -> PyResult<BoundingBox> {
    let bb = BoundingBox::new(b[0], b[1], b[2], b[3]);
    bb.validate().map_err(PyValueError::new_err)?;
    Ok(bb)
}

/// Writes a synthetic dataset to `out` and returns a summary dict.
#[pyfunction]
#[pyo3(signature = (out, n=128, rho=1.0, class_ratio=0.5, seed=0, image_size=64, noise=4.0, masks=false))]
#[allow(clippy::too_many_arguments)]
fn synthesize(
    py: Python<'_>,
    out: PathBuf,
    n: usize,
    rho: f64,
    class_ratio: f64,
    seed: u64,
    image_size: u32,
    noise: f64,
    masks: bool,
) -> PyResult<Py<PyAny>> {
    let spec = DatasetSpec {
        n,
        rho,
        class_ratio,
        seed,
        image_size: [image_size, image_size],
        noise,
        ..DatasetSpec::default()
    };
    let ds = make_dataset_with(&spec, 1).map_err(py_err)?;
    std::fs::create_dir_all(&out).map_err(|e| py_err(Error::io(&out, e)))?;
    write_dataset(&ds, &out, masks, 1).map_err(py_err)?;
    let crossing = ds
        .manifest
        .tracks
        .iter()
        .filter(|t| t.label == CrossingLabel::Crossing)
        .count();
    to_py(
        py,
        &serde_json::json!({
            "tracks": ds.manifest.len(),
            "crossing": crossing,
            "manifest": out.join("manifest.jsonl"),
        }),
    )
}

/// `(left, top, width, height)` of the fixed-size window centered on `bbox`.
#[pyfunction]
fn static_window(b: [f64; 4], width: u32, height: u32) -> PyResult<(i64, i64, u32, u32)> {
    let cfg = CropConfig {
        static_size: (width, height),
        ..CropConfig::default()
    };
    let w = cropper::static_window(&bbox(b)?, &cfg);
    Ok((w.left, w.top, w.width, w.height))
}

/// `(left, top, width, height)` of `bbox` grown by `margin · height` on every side.
#[pyfunction]
#[pyo3(signature = (b, margin=0.05))]
fn dynamic_window(b: [f64; 4], margin: f64) -> PyResult<(i64, i64, u32, u32)> {
    let cfg = CropConfig {
        dynamic_margin_fraction: margin,
        ..CropConfig::default()
    };
    let w = cropper::dynamic_window(&bbox(b)?, &cfg);
    Ok((w.left, w.top, w.width, w.height))
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    evaluator::auc(&scores, &labels).map_err(py_err)
}

/// Accuracy, AUC, precision, recall and F1 at `threshold`.
#[pyfunction]
#[pyo3(signature = (scores, labels, threshold=evaluator::DEFAULT_THRESHOLD))]
fn metrics(py: Python<'_>, scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> PyResult<Py<PyAny>> {
    to_py(py, &evaluator::metrics(&scores, &labels, threshold).map_err(py_err)?)
}

/// Cross-model analyses over prediction rows
/// (`dict(sample_id, label, model, mode, score)`).
#[pyfunction]
#[pyo3(signature = (rows, threshold=evaluator::DEFAULT_THRESHOLD))]
fn compare(py: Python<'_>, rows: Bound<'_, PyAny>, threshold: f64) -> PyResult<Py<PyAny>> {
    let text: String = py.import("json")?.call_method1("dumps", (rows,))?.extract()?;
    let rows: Vec<PredictionRow> = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &evaluator::compare(&rows, threshold).map_err(py_err)?)
}

/// Product of residual-adjusted attention matrices, first layer first.
#[pyfunction]
fn rollout(layers: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
    let mats = layers
        .into_iter()
        .map(|rows| {
            let n = rows.len();
            if rows.iter().any(|r| r.len() != n) {
                return Err(PyValueError::new_err("attention matrices must be square"));
            }
            Ok(Matrix {
                n,
                data: rows.concat(),
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let r = explainer::rollout(&mats).map_err(py_err)?;
    Ok(r.data.chunks(r.n.max(1)).map(<[f64]>::to_vec).collect())
}

/// Runs the command line with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run(args: Vec<String>) -> i32 {
    pedcross::cli::run(std::iter::once("pedcross".to_string()).chain(args))
}

/// A trained model loaded from disk.
#[pyclass(frozen)]
struct Checkpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Checkpoint {
            inner: load_checkpoint(path).map_err(py_err)?,
        })
    }

    #[getter]
    fn architecture(&self) -> &'static str {
        self.inner.model.architecture.flag()
    }

    #[getter]
    fn crop_mode(&self) -> &'static str {
        self.inner.crop.mode.as_str()
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.num_scalars()
    }

    /// Crossing probability for a stored `.clip` file.
    fn predict(&self, clip_path: PathBuf) -> PyResult<f32> {
        let clip = read_clip(clip_path).map_err(py_err)?;
        let x = clip_tensor(&clip).map_err(py_err)?;
        self.inner.predict(&x).map_err(py_err)
    }

    /// Score, per-frame relevance and `S × S` heatmaps (flat, row-major) for a `.clip` file.
    fn explain(&self, py: Python<'_>, clip_path: PathBuf) -> PyResult<Py<PyAny>> {
        let clip = read_clip(clip_path).map_err(py_err)?;
        let x = clip_tensor(&clip).map_err(py_err)?;
        let e = explainer::explain(&self.inner.assembly(), &x).map_err(py_err)?;
        let heatmaps: Vec<&Vec<f32>> = e.heatmaps.iter().map(|h| &h.values).collect();
        to_py(
            py,
            &serde_json::json!({
                "score": e.score,
                "frame_relevance": e.frame_relevance,
                "size": e.heatmaps.first().map_or(0, |h| h.size),
                "heatmaps": heatmaps,
            }),
        )
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint({}, {}, {} epochs)",
            self.architecture(),
            self.crop_mode(),
            self.inner.epoch
        )
    }
}

#[pymodule]
#[pyo3(name = "pedcross")]
fn pedcross_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(static_window, m)?)?;
    m.add_function(wrap_pyfunction!(dynamic_window, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<Checkpoint>()?;
    Ok(())
}
