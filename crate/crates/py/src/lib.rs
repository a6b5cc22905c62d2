//! Python bindings for the detector, scene generator, evaluation and FLOPs model.
//!
//! Structured results cross the boundary as JSON and are decoded with the
//! Python `json` module, so callers get plain dicts and lists.

use std::path::PathBuf;

use hoi_core::complexity::{self, StageConstants};
use hoi_core::config::RunConfig;
use hoi_core::encoder::AssignMode;
use hoi_core::evaluate;
use hoi_core::matching;
use hoi_core::model::HoiModel;
use hoi_core::scenes::{self, SceneSample};
use hoi_core::train::{self, Checkpoint, TrainOptions};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py_err(e: hoi_core::Error) -> PyErr {
    use hoi_core::Error as E;
    match e {
        E::Io { .. } => PyIOError::new_err(e.to_string()),
        E::Config(_) | E::Value(_) | E::Dimension(_) | E::Shape(_) | E::ResumeMismatch { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Run configuration; see `RunConfig` presets `paper`, `desk`, `ablation`, `tiny`.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (preset = "desk"))]
    fn new(preset: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: RunConfig::preset(preset).map_err(to_py_err)? })
    }

    /// Parses `key = value` text on top of the desk preset.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: RunConfig::parse(text).map_err(to_py_err)? })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py_err)?;
        self.inner.validate().map_err(to_py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn verbs(&self) -> Vec<String> {
        self.inner.verbs.clone()
    }

    #[getter]
    fn object_classes(&self) -> Vec<String> {
        self.inner.object_classes.clone()
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={})", self.inner.hash())
    }
}

/// One synthetic scene with its ground truth.
#[pyclass(name = "Scene", from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: SceneSample,
}

#[pymethods]
impl PyScene {
    #[getter]
    fn width(&self) -> usize {
        self.inner.image.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.image.height
    }

    /// Channel-first RGB bytes.
    #[getter]
    fn pixels(&self) -> Vec<u8> {
        self.inner.image.pixels.clone()
    }

    /// `{"humans": [...], "objects": [...], "interactions": [...]}`.
    fn annotations<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(
            py,
            &serde_json::json!({
                "humans": self.inner.humans,
                "objects": self.inner.objects,
                "interactions": self.inner.interactions,
            }),
        )
    }
}

/// Deterministic scene for `seed` under `config`.
#[pyfunction]
fn generate_scene(seed: u64, config: &PyConfig) -> PyResult<PyScene> {
    Ok(PyScene { inner: scenes::generate(seed, &config.inner).map_err(to_py_err)? })
}

/// The configured train (`test=False`) or test split.
#[pyfunction]
#[pyo3(signature = (config, test = false))]
fn generate_split(config: &PyConfig, test: bool) -> PyResult<Vec<PyScene>> {
    let split = scenes::generate_split(&config.inner, test).map_err(to_py_err)?;
    Ok(split.into_iter().map(|inner| PyScene { inner }).collect())
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: HoiModel,
}

fn scene_refs(scenes: &[PyRef<'_, PyScene>]) -> Vec<SceneSample> {
    scenes.iter().map(|s| s.inner.clone()).collect()
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model (seeded by `config.seed`).
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        Ok(PyModel { inner: HoiModel::with_default_text(&config.inner).map_err(to_py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { inner: train::load_model(&path).map_err(to_py_err)? })
    }

    /// Writes parameters (without optimizer state) to `path`.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let opt = train::AdamW::new(self.inner.cfg.weight_decay);
        Checkpoint::capture(&self.inner, &opt, 0).and_then(|c| c.save(&path)).map_err(to_py_err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig { inner: self.inner.cfg.clone() }
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.store.iter().map(|(_, p)| p.var.elem_count()).sum()
    }

    /// Noise-free loss breakdown on a batch.
    fn loss<'py>(&self, py: Python<'py>, scenes: Vec<PyRef<'_, PyScene>>) -> PyResult<Bound<'py, PyAny>> {
        let owned = scene_refs(&scenes);
        let refs: Vec<&SceneSample> = owned.iter().collect();
        let out = self.inner.forward_scenes(&refs, AssignMode::Eval).map_err(to_py_err)?;
        let loss = self.inner.loss(&out, &refs).map_err(to_py_err)?;
        json_to_py(py, &loss.breakdown)
    }

    /// Scored triplets and detections: `{"hoi": [...], "detections": [...]}`.
    fn predict<'py>(&self, py: Python<'py>, scenes: Vec<PyRef<'_, PyScene>>) -> PyResult<Bound<'py, PyAny>> {
        let owned = scene_refs(&scenes);
        let refs: Vec<&SceneSample> = owned.iter().collect();
        let out = self.inner.forward_scenes(&refs, AssignMode::Eval).map_err(to_py_err)?;
        let p = self.inner.predict(&out, 0).map_err(to_py_err)?;
        json_to_py(py, &serde_json::json!({ "hoi": p.hoi, "detections": p.detections }))
    }

    fn evaluate<'py>(&self, py: Python<'py>, scenes: Vec<PyRef<'_, PyScene>>) -> PyResult<Bound<'py, PyAny>> {
        let report = evaluate::evaluate(&self.inner, &scene_refs(&scenes)).map_err(to_py_err)?;
        json_to_py(py, &report)
    }

    /// Stage-wise cluster ownership of every grid cell.
    fn cluster_maps<'py>(&self, py: Python<'py>, scene: &PyScene) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &evaluate::cluster_maps(&self.inner, &scene.inner).map_err(to_py_err)?)
    }
}

/// Trains on the configured train split; returns the model and per-epoch records.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None))]
fn train_model<'py>(py: Python<'py>, config: &PyConfig, out_dir: Option<PathBuf>) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let data = scenes::generate_split(&config.inner, false).map_err(to_py_err)?;
    let run = train::train(&config.inner, &data, &TrainOptions { out_dir, ..Default::default() }).map_err(to_py_err)?;
    let records = json_to_py(py, &run.records)?;
    Ok((PyModel { inner: run.model }, records))
}

/// Baseline attention FLOPs for `n` tokens of width `c` and `queries` queries.
#[pyfunction]
#[pyo3(signature = (n, c, queries = 100))]
fn omega_baseline(n: u64, c: u64, queries: u64) -> u128 {
    complexity::omega_baseline(n, c, queries).total
}

#[pyfunction]
#[pyo3(signature = (n, c, queries = 36))]
fn omega_agglomerative(n: u64, c: u64, queries: u64) -> u128 {
    complexity::omega_agglomerative(n, c, queries).total
}

/// Quadratic coefficients and roots of the FLOP difference.
#[pyfunction]
#[pyo3(signature = (dim = 256, baseline_queries = 100))]
fn crossover<'py>(py: Python<'py>, dim: u64, baseline_queries: u64) -> PyResult<Bound<'py, PyAny>> {
    let c = complexity::crossover(dim, baseline_queries, StageConstants::default()).map_err(to_py_err)?;
    json_to_py(py, &c)
}

/// Maximum-similarity assignment of a square matrix; `result[row] = column`.
#[pyfunction]
fn hungarian(similarity: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    Ok(matching::hungarian_match(&similarity).map_err(to_py_err)?.sigma)
}

#[pymodule]
pub fn hoi_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(generate_split, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(omega_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(omega_agglomerative, m)?)?;
    m.add_function(wrap_pyfunction!(crossover, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    Ok(())
}
