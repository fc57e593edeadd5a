//! Python bindings for the layer-selection toolkit.
//!
//! Stacks, manifests and LSA reports are wrapped as classes; estimators,
//! metrics and losses are plain functions over Python lists.

use layersel::io::{self, DatasetManifest, SplitRatios};
use layersel::lsa::{self, LsaConfig};
use layersel::synth::{generate_benchmark, SynthConfig};
use layersel::{adapter, heads, metrics, optim, Error};
use pyo3::create_exception;
use pyo3::exceptions::{PyIndexError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(layersel_py, LayerselError, PyValueError, "Invalid input or data.");
create_exception!(layersel_py, FormatError, LayerselError, "Malformed LFS1 or LLM1 bytes.");
create_exception!(layersel_py, ManifestError, LayerselError, "Malformed manifest line.");

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::BadMagic { .. } | Error::Truncated(_) | Error::SizeMismatch(_) | Error::NonFinite(_) => {
            FormatError::new_err(msg)
        }
        Error::Manifest { .. } => ManifestError::new_err(msg),
        _ => LayerselError::new_err(msg),
    }
}

/// Per-layer features of a sample population, stored as f32.
#[pyclass(name = "FeatureStack", module = "layersel_py", frozen)]
struct PyFeatureStack(io::FeatureStack);

#[pymethods]
impl PyFeatureStack {
    /// `data` is flattened in (sample, layer, feature) order.
    #[new]
    fn new(n_layers: usize, dim: usize, data: Vec<f32>, sample_ids: Vec<String>) -> PyResult<Self> {
        io::FeatureStack::new(n_layers, dim, data, sample_ids).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        io::read_feature_stack(path).map(Self).map_err(to_py)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        io::write_feature_stack(&self.0, path).map_err(to_py)
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        io::FeatureStack::from_bytes(bytes).map(Self).map_err(to_py)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        self.0.to_bytes().map_err(to_py)
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.0.n_samples()
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.0.n_layers()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn sample_ids(&self) -> Vec<String> {
        self.0.sample_ids().to_vec()
    }

    fn vector(&self, sample: usize, layer: usize) -> PyResult<Vec<f32>> {
        if sample >= self.0.n_samples() || layer >= self.0.n_layers() {
            return Err(PyIndexError::new_err(format!("({sample}, {layer}) out of range")));
        }
        Ok(self.0.vector(sample, layer).to_vec())
    }

    /// Rows of one layer as lists of floats.
    fn layer(&self, layer: usize) -> PyResult<Vec<Vec<f64>>> {
        if layer >= self.0.n_layers() {
            return Err(PyIndexError::new_err(format!("layer {layer} out of range")));
        }
        let m = self.0.layer_matrix(layer);
        Ok((0..m.rows()).map(|i| m.row(i).to_vec()).collect())
    }

    fn __len__(&self) -> usize {
        self.0.n_samples()
    }

    fn __repr__(&self) -> String {
        format!(
            "FeatureStack(n_samples={}, n_layers={}, dim={})",
            self.0.n_samples(),
            self.0.n_layers(),
            self.0.dim()
        )
    }
}

/// Sample records with optional split assignments.
#[pyclass(name = "Manifest", module = "layersel_py", frozen)]
struct PyManifest(DatasetManifest);

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        io::load_manifest(path).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        DatasetManifest::parse_jsonl(text).map(Self).map_err(to_py)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        io::write_manifest(&self.0, path).map_err(to_py)
    }

    fn to_jsonl(&self) -> String {
        self.0.to_jsonl()
    }

    /// Assigns train/val/test by source group; deterministic in `seed`.
    #[pyo3(signature = (ratios = (4, 1, 1), seed = 0))]
    fn split(&self, ratios: (u32, u32, u32), seed: u64) -> PyResult<Self> {
        io::split_dataset(&self.0, SplitRatios([ratios.0, ratios.1, ratios.2]), seed)
            .map(Self)
            .map_err(to_py)
    }

    #[getter]
    fn editors(&self) -> Vec<String> {
        self.0.editors.clone()
    }

    /// Records as dicts, in file order.
    fn records<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyAny>>> {
        let json = py.import("json")?;
        self.0
            .records
            .iter()
            .map(|r| {
                let text = serde_json::to_string(r).map_err(|e| LayerselError::new_err(e.to_string()))?;
                json.call_method1("loads", (text,))
            })
            .collect()
    }

    fn __len__(&self) -> usize {
        self.0.records.len()
    }
}

/// Per-layer LSA statistics and the selected layer.
#[pyclass(name = "LsaReport", module = "layersel_py", frozen)]
struct PyLsaReport(lsa::LsaReport);

#[pymethods]
impl PyLsaReport {
    #[getter]
    fn selected_layer(&self) -> usize {
        self.0.selected_layer()
    }

    #[getter]
    fn scores(&self) -> Vec<f64> {
        self.0.profiles.iter().map(|p| p.score).collect()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.0.warnings.clone()
    }

    /// One dict per layer: raw and normalized KL, LDR and entropy, and the score.
    fn profiles<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.0
            .profiles
            .iter()
            .map(|p| {
                let d = PyDict::new(py);
                d.set_item("layer", p.layer)?;
                d.set_item("d_kl", p.d_kl)?;
                d.set_item("ldr", p.ldr)?;
                d.set_item("entropy", p.entropy)?;
                d.set_item("d_kl_hat", p.d_kl_hat)?;
                d.set_item("ldr_hat", p.ldr_hat)?;
                d.set_item("entropy_hat", p.entropy_hat)?;
                d.set_item("score", p.score)?;
                Ok(d)
            })
            .collect()
    }
}

#[pyfunction]
#[pyo3(signature = (real, edited, n_bins = 64, alpha = 1e-6, eps = 1e-6))]
fn profile_layers(
    real: &PyFeatureStack,
    edited: &PyFeatureStack,
    n_bins: usize,
    alpha: f64,
    eps: f64,
) -> PyResult<PyLsaReport> {
    let cfg = LsaConfig { n_bins, alpha, eps };
    lsa::profile_layers(&real.0, &edited.0, &cfg).map(PyLsaReport).map_err(to_py)
}

/// Argmax of the scores; ties go to the deepest layer.
#[pyfunction]
fn select_layer(scores: Vec<f64>) -> PyResult<usize> {
    let profiles: Vec<lsa::LayerProfile> = scores
        .into_iter()
        .enumerate()
        .map(|(layer, score)| lsa::LayerProfile {
            layer,
            d_kl: 0.0,
            ldr: 0.0,
            entropy: 0.0,
            d_kl_hat: 0.0,
            ldr_hat: 0.0,
            entropy_hat: 0.0,
            score,
        })
        .collect();
    lsa::select_layer(&profiles).map_err(to_py)
}

#[pyfunction]
fn srcc(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::srcc(&x, &y).map_err(to_py)
}

#[pyfunction]
fn krcc(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::krcc(&x, &y).map_err(to_py)
}

#[pyfunction]
fn plcc(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::plcc(&x, &y).map_err(to_py)
}

#[pyfunction]
fn rmse(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::rmse(&x, &y).map_err(to_py)
}

/// Cosine-similarity contrastive loss of one (anchor, positive, negative) triplet.
#[pyfunction]
#[pyo3(signature = (anchor, positive, negative, tau = 0.07))]
fn contrastive_loss(anchor: Vec<f64>, positive: Vec<f64>, negative: Vec<f64>, tau: f64) -> PyResult<f64> {
    adapter::contrastive_loss(&anchor, &positive, &negative, tau).map_err(to_py)
}

#[pyfunction]
fn bce_loss(p: f64, y: u8) -> f64 {
    heads::bce_loss(p, y)
}

#[pyfunction]
fn cosine_lr(lr0: f64, lr_min: f64, total_steps: u64, step: u64) -> PyResult<f64> {
    let sched = optim::CosineSchedule::new(lr0, lr_min, total_steps).map_err(to_py)?;
    Ok(optim::cosine_lr(&sched, step))
}

/// Generates a planted benchmark; returns (real, edited, split manifest).
#[pyfunction]
#[pyo3(signature = (
    seed = 0, editors = 17, per_editor = 100, layers = 12, dim = 64,
    informative_layer = None, shift = 2.0, noise = 0.2, ratios = (4, 1, 1)
))]
#[allow(clippy::too_many_arguments)]
fn synth(
    seed: u64,
    editors: usize,
    per_editor: usize,
    layers: usize,
    dim: usize,
    informative_layer: Option<usize>,
    shift: f64,
    noise: f64,
    ratios: (u32, u32, u32),
) -> PyResult<(PyFeatureStack, PyFeatureStack, PyManifest)> {
    let cfg = SynthConfig {
        n_editors: editors,
        samples_per_editor: per_editor,
        n_layers: layers,
        dim,
        informative_layer: informative_layer
            .unwrap_or_else(|| SynthConfig::default().informative_layer.min(layers.saturating_sub(1))),
        shift,
        noise,
        seed,
    };
    let b = generate_benchmark(&cfg).map_err(to_py)?;
    let manifest = io::split_dataset(&b.manifest, SplitRatios([ratios.0, ratios.1, ratios.2]), seed).map_err(to_py)?;
    Ok((PyFeatureStack(b.real), PyFeatureStack(b.edited), PyManifest(manifest)))
}

#[pymodule]
fn layersel_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("LayerselError", py.get_type::<LayerselError>())?;
    m.add("FormatError", py.get_type::<FormatError>())?;
    m.add("ManifestError", py.get_type::<ManifestError>())?;
    m.add_class::<PyFeatureStack>()?;
    m.add_class::<PyManifest>()?;
    m.add_class::<PyLsaReport>()?;
    m.add_function(wrap_pyfunction!(profile_layers, m)?)?;
    m.add_function(wrap_pyfunction!(select_layer, m)?)?;
    m.add_function(wrap_pyfunction!(srcc, m)?)?;
    m.add_function(wrap_pyfunction!(krcc, m)?)?;
    m.add_function(wrap_pyfunction!(plcc, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(bce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    Ok(())
}
