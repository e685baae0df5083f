//! Python bindings: images travel as nested lists of floats, configs as JSON.

use std::path::PathBuf;

use gksnet::checkpoint::Checkpoint;
use gksnet::config::DatasetPaths;
use gksnet::eval::{Metrics, PredictMode};
use gksnet::pipeline::{self, PipelineConfig};
use gksnet::preclass::{ImagePair, PixelClass};
use gksnet::synth::{generate_synthetic_pair, SynthConfig};
use gksnet::train::{history_jsonl, lr_schedule, TrainConfig};
use gksnet::{GksError, Grid, Image, Mask};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: GksError) -> PyErr {
    match e {
        GksError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn grid_from_rows<T: Copy>(rows: Vec<Vec<T>>) -> PyResult<Grid<T>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Grid::new(h, w, rows.into_iter().flatten().collect()).map_err(to_py)
}

fn grid_to_rows<T: Copy>(g: &Grid<T>) -> Vec<Vec<T>> {
    g.data().chunks(g.width().max(1)).map(<[T]>::to_vec).collect()
}

fn parse_mode(mode: &str) -> PyResult<PredictMode> {
    match mode {
        "uncertain_only" | "uncertain-only" => Ok(PredictMode::UncertainOnly),
        "full" => Ok(PredictMode::Full),
        other => Err(PyValueError::new_err(format!("unknown predict mode {other:?}"))),
    }
}

/// Two co-registered images with an optional 0/1 change mask.
#[pyclass(name = "ImagePair", module = "gksnet_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyImagePair {
    inner: ImagePair,
}

#[pymethods]
impl PyImagePair {
    #[new]
    #[pyo3(signature = (img1, img2, ground_truth=None))]
    fn new(img1: Vec<Vec<f64>>, img2: Vec<Vec<f64>>, ground_truth: Option<Vec<Vec<u8>>>) -> PyResult<Self> {
        let gt: Option<Mask> = ground_truth.map(grid_from_rows).transpose()?;
        let inner = ImagePair::new(grid_from_rows(img1)?, grid_from_rows(img2)?, gt).map_err(to_py)?;
        Ok(PyImagePair { inner })
    }

    /// Loads `img1`, `img2` and optional `gt` (.pgm or .png) from a directory.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let inner = DatasetPaths::from_dir(&dir).load().map_err(to_py)?;
        Ok(PyImagePair { inner })
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.dims()
    }

    fn img1(&self) -> Vec<Vec<f64>> {
        grid_to_rows(self.inner.img1())
    }

    fn img2(&self) -> Vec<Vec<f64>> {
        grid_to_rows(self.inner.img2())
    }

    fn ground_truth(&self) -> Option<Vec<Vec<u8>>> {
        self.inner.ground_truth().map(grid_to_rows)
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.inner.dims();
        format!("ImagePair({h}x{w}, ground_truth={})", self.inner.ground_truth().is_some())
    }
}

/// Model, training and sampling settings.
#[pyclass(name = "PipelineConfig", module = "gksnet_py", skip_from_py_object)]
#[derive(Clone)]
struct PyPipelineConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyPipelineConfig {
    #[new]
    fn new() -> Self {
        PyPipelineConfig { inner: PipelineConfig::default() }
    }

    /// Shortened training profile for a single workstation.
    #[staticmethod]
    fn desk() -> Self {
        PyPipelineConfig { inner: PipelineConfig::desk() }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: PipelineConfig =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(to_py)?;
        Ok(PyPipelineConfig { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("config serializes")
    }

    /// Returns a copy with one of the named ablation variants applied.
    fn variant(&self, name: &str) -> PyResult<Self> {
        let v = pipeline::Variant::parse(name).map_err(to_py)?;
        let mut inner = self.inner.clone();
        inner.model = v.apply(&inner.model);
        Ok(PyPipelineConfig { inner })
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.train.epochs
    }

    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.train.epochs = v;
    }

    #[getter]
    fn base_lr(&self) -> f64 {
        self.inner.train.base_lr
    }

    #[setter]
    fn set_base_lr(&mut self, v: f64) {
        self.inner.train.base_lr = v;
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.inner.model.r
    }

    #[setter]
    fn set_patch_size(&mut self, v: usize) {
        self.inner.model.r = v;
    }

    #[getter]
    fn sample_ratio(&self) -> f64 {
        self.inner.sample_ratio
    }

    #[setter]
    fn set_sample_ratio(&mut self, v: f64) {
        self.inner.sample_ratio = v;
    }

    fn __repr__(&self) -> String {
        format!("PipelineConfig({})", serde_json::to_string(&self.inner).expect("config serializes"))
    }
}

/// Confusion counts and summary scores against a reference mask.
#[pyclass(name = "Metrics", module = "gksnet_py", frozen, get_all, from_py_object)]
#[derive(Clone)]
struct PyMetrics {
    fp: u64,
    #[pyo3(name = "fn")]
    fn_: u64,
    tp: u64,
    tn: u64,
    oe: u64,
    pcc: f64,
    kc: Option<f64>,
    f1: Option<f64>,
}

impl From<Metrics> for PyMetrics {
    fn from(m: Metrics) -> Self {
        PyMetrics { fp: m.fp, fn_: m.fn_, tp: m.tp, tn: m.tn, oe: m.oe, pcc: m.pcc, kc: m.kc, f1: m.f1 }
    }
}

#[pymethods]
impl PyMetrics {
    fn to_json(&self) -> String {
        Metrics {
            fp: self.fp,
            fn_: self.fn_,
            tp: self.tp,
            tn: self.tn,
            oe: self.oe,
            pcc: self.pcc,
            kc: self.kc,
            f1: self.f1,
        }
        .to_json()
    }

    fn __repr__(&self) -> String {
        format!("Metrics({})", self.to_json())
    }
}

/// Trained parameters, model settings and support set.
#[pyclass(name = "Checkpoint", module = "gksnet_py", frozen)]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint { inner: Checkpoint::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        self.inner.to_bytes().map_err(to_py)
    }

    #[staticmethod]
    fn from_bytes(data: Vec<u8>) -> PyResult<Self> {
        let inner = Checkpoint::from_bytes(&data, std::path::Path::new("<bytes>")).map_err(to_py)?;
        Ok(PyCheckpoint { inner })
    }

    fn model_config_json(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serializes")
    }

    #[getter]
    fn support_size(&self) -> usize {
        self.inner.support.as_ref().map_or(0, |s| s.len())
    }
}

/// Output of a full run.
#[pyclass(name = "RunResult", module = "gksnet_py", frozen, get_all)]
struct PyRunResult {
    change_map: Vec<Vec<u8>>,
    metrics: Option<PyMetrics>,
    checkpoint: Py<PyCheckpoint>,
    history_jsonl: String,
}

#[pyfunction]
#[pyo3(signature = (height=128, width=128, n_regions=12, change_fraction=0.15, change_gain=8.0, looks=4.0, seed=0))]
fn synthetic_pair(
    height: usize,
    width: usize,
    n_regions: usize,
    change_fraction: f64,
    change_gain: f64,
    looks: f64,
    seed: u64,
) -> PyResult<PyImagePair> {
    let cfg = SynthConfig { height, width, n_regions, change_fraction, change_gain, looks, seed };
    Ok(PyImagePair { inner: generate_synthetic_pair(&cfg).map_err(to_py)? })
}

/// Difference image and per-pixel classes: 0 unchanged, 1 changed, 2 uncertain.
#[pyfunction]
#[pyo3(signature = (pair, seed=0, config=None))]
fn preclassify(
    pair: &PyImagePair,
    seed: u64,
    config: Option<&PyPipelineConfig>,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<u8>>)> {
    let cfg = config.map_or_else(PipelineConfig::default, |c| c.inner.clone());
    let pre = pipeline::preclassify(&pair.inner, &cfg, seed).map_err(to_py)?;
    let classes = pre.map.labels.map(|c| match c {
        PixelClass::Unchanged => 0u8,
        PixelClass::Changed => 1,
        PixelClass::Uncertain => 2,
    });
    let di: &Image = &pre.di.0;
    Ok((grid_to_rows(di), grid_to_rows(&classes)))
}

/// Trains on `source` (labeled) and `target`, then predicts the target change map.
#[pyfunction]
#[pyo3(signature = (source, target, config=None, seed=0))]
fn run_pipeline(
    py: Python<'_>,
    source: &PyImagePair,
    target: &PyImagePair,
    config: Option<&PyPipelineConfig>,
    seed: u64,
) -> PyResult<PyRunResult> {
    let cfg = config.map_or_else(PipelineConfig::desk, |c| c.inner.clone());
    let (s, t) = (source.inner.clone(), target.inner.clone());
    let out = py
        .detach(move || pipeline::run_pipeline(&s, &t, &cfg, seed))
        .map_err(to_py)?;
    Ok(PyRunResult {
        change_map: grid_to_rows(&out.change_map),
        metrics: out.metrics.map(PyMetrics::from),
        checkpoint: Py::new(py, PyCheckpoint { inner: out.trained.checkpoint })?,
        history_jsonl: history_jsonl(&out.trained.history),
    })
}

/// Change map for `target` from a trained checkpoint.
#[pyfunction]
#[pyo3(signature = (target, checkpoint, seed=0, mode="uncertain_only", config=None))]
fn predict(
    py: Python<'_>,
    target: &PyImagePair,
    checkpoint: &PyCheckpoint,
    seed: u64,
    mode: &str,
    config: Option<&PyPipelineConfig>,
) -> PyResult<Vec<Vec<u8>>> {
    let mode = parse_mode(mode)?;
    let cfg = config.map_or_else(PipelineConfig::default, |c| c.inner.clone());
    let map = py
        .detach(|| {
            let pre = pipeline::preclassify(&target.inner, &cfg, seed)?;
            pipeline::predict(&target.inner, &pre, &checkpoint.inner, mode)
        })
        .map_err(to_py)?;
    Ok(grid_to_rows(&map))
}

#[pyfunction]
fn evaluate(change_map: Vec<Vec<u8>>, ground_truth: Vec<Vec<u8>>) -> PyResult<PyMetrics> {
    let m = Metrics::evaluate(&grid_from_rows(change_map)?, &grid_from_rows(ground_truth)?).map_err(to_py)?;
    Ok(m.into())
}

/// Learning rate at a 1-based epoch under the default step schedule.
#[pyfunction]
#[pyo3(signature = (epoch, base_lr=1e-4))]
fn learning_rate(epoch: usize, base_lr: f64) -> f64 {
    lr_schedule(epoch, &TrainConfig { base_lr, ..TrainConfig::default() })
}

#[pymodule]
fn gksnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImagePair>()?;
    m.add_class::<PyPipelineConfig>()?;
    m.add_class::<PyMetrics>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(synthetic_pair, m)?)?;
    m.add_function(wrap_pyfunction!(preclassify, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    Ok(())
}
