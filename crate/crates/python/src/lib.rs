//! Python bindings: losses, metrics, phantoms, configuration, training and evaluation.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;

use voxelsim::checkpoint::{load_checkpoint, strip_training_only as strip};
use voxelsim::config::TrainConfig;
use voxelsim::data::{self, DatasetManifest, IntensityDomain, PhantomConfig, Split};
use voxelsim::eval::MetricReport;
use voxelsim::model::Model;
use voxelsim::sampler::{self, SamplerConfig, VoxelTag};
use voxelsim::{losses, metrics, trainer, Dims3, Error, Tensor};

create_exception!(voxelsim_py, VoxelsimError, PyException);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingFile(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::Config(m) => PyValueError::new_err(format!("config error: {m}")),
        Error::ShapeMismatch(m) => PyValueError::new_err(format!("shape mismatch: {m}")),
        Error::InvalidInput(m) => PyValueError::new_err(m),
        other => VoxelsimError::new_err(other.to_string()),
    }
}

fn dims(shape: [usize; 3]) -> PyResult<Dims3> {
    Dims3::from_slice(&shape).map_err(py_err)
}

fn parse_split(split: &str) -> PyResult<Split> {
    split.parse().map_err(py_err)
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

#[pyfunction]
fn neg_cosine(p: Vec<f64>, z: Vec<f64>) -> PyResult<f64> {
    losses::neg_cosine(&p, &z).map_err(py_err)
}

/// Soft Dice loss of raw scores laid out `[classes, voxels]`.
#[pyfunction]
fn soft_dice_loss(scores: Vec<f64>, classes: usize, labels: Vec<u8>) -> PyResult<f64> {
    let n = labels.len();
    if scores.len() != classes * n {
        return Err(PyValueError::new_err("scores must hold classes * len(labels) values"));
    }
    losses::soft_dice_loss(&Tensor::feature_map(classes, Dims3::new(n, 1, 1), scores), &labels).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (p, z, dim, exclude_self = true))]
fn voxel_pair_similarity(p: Vec<f64>, z: Vec<f64>, dim: usize, exclude_self: bool) -> PyResult<f64> {
    losses::voxel_pair_similarity(&p, &z, dim, exclude_self).map_err(py_err)
}

#[pyfunction]
fn class_weights(counts: Vec<usize>) -> PyResult<Vec<f64>> {
    losses::class_weights(&counts).map_err(py_err)
}

#[pyfunction]
fn total_loss(dice: f64, feature: f64, lam: f64) -> f64 {
    losses::total_loss(dice, feature, lam)
}

#[pyfunction]
#[pyo3(signature = (epoch, total_epochs, base_lr, power = 0.9))]
fn poly_lr(epoch: usize, total_epochs: usize, base_lr: f64, power: f64) -> PyResult<f64> {
    voxelsim::config::poly_lr(epoch, total_epochs, base_lr, power).map_err(py_err)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[pyfunction]
fn dsc(pred: Vec<bool>, gt: Vec<bool>) -> PyResult<f64> {
    metrics::dsc(&pred, &gt).map_err(py_err)
}

/// `None` when either mask is empty.
#[pyfunction]
fn hd95(pred: Vec<bool>, gt: Vec<bool>, shape: [usize; 3], spacing: [f64; 3]) -> PyResult<Option<f64>> {
    metrics::hd95(&pred, &gt, dims(shape)?, spacing).map_err(py_err)
}

#[pyfunction]
fn assd(pred: Vec<bool>, gt: Vec<bool>, shape: [usize; 3], spacing: [f64; 3]) -> PyResult<Option<f64>> {
    metrics::assd(&pred, &gt, dims(shape)?, spacing).map_err(py_err)
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

#[pyfunction]
fn downsample_label(label: Vec<u8>, shape: [usize; 3], target: [usize; 3]) -> PyResult<Vec<u8>> {
    sampler::downsample_label(&label, dims(shape)?, dims(target)?).map_err(py_err)
}

/// Samples one layer; `is_fn[i]` marks voxel `i` as a false negative. Returns the plan as JSON.
#[pyfunction]
#[pyo3(signature = (label, is_fn, seed, total_cap = 1700, fn_cap = 1000))]
fn sample_voxels(label: Vec<u8>, is_fn: Vec<bool>, seed: u64, total_cap: usize, fn_cap: usize) -> PyResult<String> {
    let tags: Vec<VoxelTag> = is_fn
        .iter()
        .map(|&f| if f { VoxelTag::Fn } else { VoxelTag::Tp })
        .collect();
    let cfg = SamplerConfig {
        total_cap,
        fn_cap,
        ..SamplerConfig::default()
    };
    sampler::sample_voxels(&label, &tags, &cfg, seed)
        .and_then(|p| p.to_json())
        .map_err(py_err)
}

// ---------------------------------------------------------------------------
// Volumes
// ---------------------------------------------------------------------------

#[pyclass(name = "Volume", module = "voxelsim_py", skip_from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: data::VolumeSample,
}

#[pymethods]
impl PyVolume {
    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    /// `(nx, ny, nz)`; arrays are x-fastest.
    #[getter]
    fn shape(&self) -> [usize; 3] {
        self.inner.dims.as_array()
    }

    #[getter]
    fn spacing(&self) -> [f64; 3] {
        self.inner.spacing
    }

    #[getter]
    fn image(&self) -> Vec<f32> {
        self.inner.image.clone()
    }

    #[getter]
    fn label(&self) -> Vec<u8> {
        self.inner.label.clone()
    }

    #[getter]
    fn normalized(&self) -> bool {
        self.inner.intensity == IntensityDomain::Normalized
    }

    /// Windowed and resampled copy on the grid of `config`.
    fn preprocess(&self, config: &PyTrainConfig) -> PyResult<PyVolume> {
        let inner = data::preprocess(&self.inner, &config.inner.preprocess).map_err(py_err)?;
        Ok(PyVolume { inner })
    }

    fn __repr__(&self) -> String {
        format!("Volume(id={:?}, shape={:?})", self.inner.id, self.inner.dims.as_array())
    }
}

#[pyfunction]
#[pyo3(signature = (seed, shape, n_classes = 3))]
fn generate_phantom(seed: u64, shape: [usize; 3], n_classes: usize) -> PyResult<PyVolume> {
    let inner = data::generate_phantom(seed, &PhantomConfig::new(shape, n_classes))
        .map_err(py_err)?
        .sample;
    Ok(PyVolume { inner })
}

#[pyfunction]
fn load_volume(image: PathBuf, label: PathBuf) -> PyResult<PyVolume> {
    let id = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(PyVolume {
        inner: data::load_volume(&image, &label, &id).map_err(py_err)?,
    })
}

/// Writes a phantom dataset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, seed, train_count, test_count, shape, n_classes = 3))]
fn synthesize_dataset(
    out_dir: PathBuf,
    seed: u64,
    train_count: usize,
    test_count: usize,
    shape: [usize; 3],
    n_classes: usize,
) -> PyResult<PathBuf> {
    std::fs::create_dir_all(&out_dir).map_err(|e| py_err(Error::io(&out_dir, e)))?;
    data::synthesize_dataset(
        &out_dir,
        seed,
        train_count,
        test_count,
        &PhantomConfig::new(shape, n_classes),
    )
    .map_err(py_err)
}

// ---------------------------------------------------------------------------
// Configuration, training, evaluation
// ---------------------------------------------------------------------------

#[pyclass(name = "TrainConfig", module = "voxelsim_py", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: TrainConfig::default(),
        }
    }

    #[staticmethod]
    fn desk(shape: [usize; 3], n_classes: usize) -> Self {
        Self {
            inner: TrainConfig::desk(shape, n_classes),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TrainConfig::load(&path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: TrainConfig = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    #[getter]
    fn method_label(&self) -> String {
        self.inner.method_label()
    }

    /// Effective feature-loss weight.
    #[getter]
    fn get_lam(&self) -> f64 {
        self.inner.lambda()
    }

    #[setter]
    fn set_lam(&mut self, v: Option<f64>) {
        self.inner.lambda = v;
    }

    #[getter]
    fn get_epochs(&self) -> usize {
        self.inner.epochs
    }

    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.epochs = v;
    }

    #[getter]
    fn get_base_lr(&self) -> f64 {
        self.inner.base_lr
    }

    #[setter]
    fn set_base_lr(&mut self, v: f64) {
        self.inner.base_lr = v;
    }

    #[getter]
    fn get_feature_layers(&self) -> usize {
        self.inner.feature_layers
    }

    #[setter]
    fn set_feature_layers(&mut self, v: usize) {
        self.inner.feature_layers = v;
    }

    #[getter]
    fn get_seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn get_label_fraction(&self) -> f64 {
        self.inner.label_fraction
    }

    #[setter]
    fn set_label_fraction(&mut self, v: f64) {
        self.inner.label_fraction = v;
    }

    #[getter]
    fn get_hidden_dim(&self) -> usize {
        self.inner.heads.hidden_dim
    }

    #[setter]
    fn set_hidden_dim(&mut self, v: usize) {
        self.inner.heads.hidden_dim = v;
    }

    #[getter]
    fn get_weighted(&self) -> bool {
        self.inner.feature_loss.weighted
    }

    #[setter]
    fn set_weighted(&mut self, v: bool) {
        self.inner.feature_loss.weighted = v;
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(label={:?}, epochs={}, feature_layers={}, lam={})",
            self.inner.method_label(),
            self.inner.epochs,
            self.inner.feature_layers,
            self.inner.lambda()
        )
    }
}

#[pyclass(name = "MetricReport", module = "voxelsim_py")]
struct PyMetricReport {
    inner: MetricReport,
}

#[pymethods]
impl PyMetricReport {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: MetricReport::load(&path).map_err(py_err)?,
        })
    }

    #[getter]
    fn label(&self) -> String {
        self.inner.label.clone()
    }

    #[getter]
    fn average_dsc(&self) -> f64 {
        self.inner.average_dsc
    }

    #[getter]
    fn average_hd95(&self) -> Option<f64> {
        self.inner.average_hd95
    }

    #[getter]
    fn average_assd(&self) -> Option<f64> {
        self.inner.average_assd
    }

    /// `(organ, dsc, hd95, assd)` per organ.
    fn organs(&self) -> Vec<(String, f64, Option<f64>, Option<f64>)> {
        self.inner
            .organs
            .iter()
            .map(|o| (o.name.clone(), o.dsc, o.hd95, o.assd))
            .collect()
    }

    fn to_csv(&self) -> PyResult<String> {
        self.inner.to_csv().map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "MetricReport(label={:?}, average_dsc={:.4})",
            self.inner.label, self.inner.average_dsc
        )
    }
}

/// Inference model loaded from a checkpoint.
#[pyclass(name = "Model", module = "voxelsim_py")]
struct PyModel {
    inner: Model,
    label: String,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&checkpoint).map_err(py_err)?;
        let label = ck.header.config.method_label();
        Ok(Self {
            inner: Model::from_store(&ck.header.config, ck.store).map_err(py_err)?,
            label,
        })
    }

    #[getter]
    fn label(&self) -> String {
        self.label.clone()
    }

    #[getter]
    fn has_heads(&self) -> bool {
        self.inner.heads.is_some()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.store.scalar_count()
    }

    /// Raw scores `[classes, voxels]` flattened, for a preprocessed volume.
    fn score_map(&self, volume: &PyVolume) -> PyResult<Vec<f64>> {
        Ok(self.inner.score_map(&volume.inner).map_err(py_err)?.into_data())
    }

    fn predict(&self, volume: &PyVolume) -> PyResult<Vec<u8>> {
        self.inner.predict(&volume.inner).map_err(py_err)
    }
}

/// Trains on the manifest's training split; returns `(best_checkpoint, best_dsc, epochs_run)`.
#[pyfunction]
fn train(
    py: Python<'_>,
    manifest: PathBuf,
    config: &PyTrainConfig,
    out_dir: PathBuf,
) -> PyResult<(PathBuf, Option<f64>, usize)> {
    let cfg = config.inner.clone();
    let out = py
        .detach(|| {
            let m = DatasetManifest::load(&manifest)?;
            trainer::fit(&m, cfg, &out_dir)
        })
        .map_err(py_err)?;
    Ok((out.best_checkpoint, out.best_metric, out.history.len()))
}

#[pyfunction]
#[pyo3(signature = (checkpoint, manifest, split = "test"))]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, manifest: PathBuf, split: &str) -> PyResult<PyMetricReport> {
    let split = parse_split(split)?;
    let inner = py
        .detach(|| {
            let m = DatasetManifest::load(&manifest)?;
            voxelsim::eval::evaluate(&checkpoint, &m, split)
        })
        .map_err(py_err)?;
    Ok(PyMetricReport { inner })
}

/// Writes sampled `z` embeddings to CSV; returns the row count.
#[pyfunction]
#[pyo3(signature = (checkpoint, manifest, layers, out, cap = 1000, split = "test"))]
fn export_embeddings(
    checkpoint: PathBuf,
    manifest: PathBuf,
    layers: Vec<u32>,
    out: PathBuf,
    cap: usize,
    split: &str,
) -> PyResult<usize> {
    let split = parse_split(split)?;
    let m = DatasetManifest::load(&manifest).map_err(py_err)?;
    let cfg = load_checkpoint(&checkpoint).map_err(py_err)?.header.config;
    let volumes = trainer::load_preprocessed(&m, split, &cfg).map_err(py_err)?;
    voxelsim::eval::export_embeddings(&checkpoint, &volumes, &layers, cap, &out).map_err(py_err)
}

/// Copies a checkpoint without its training-only tensors.
#[pyfunction]
fn strip_training_only(src: PathBuf, dst: PathBuf) -> PyResult<()> {
    strip(&src, &dst).map(|_| ()).map_err(py_err)
}

#[pymodule]
pub fn voxelsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("VoxelsimError", m.py().get_type::<VoxelsimError>())?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyMetricReport>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(neg_cosine, m)?)?;
    m.add_function(wrap_pyfunction!(soft_dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(voxel_pair_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(class_weights, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(assd, m)?)?;
    m.add_function(wrap_pyfunction!(downsample_label, m)?)?;
    m.add_function(wrap_pyfunction!(sample_voxels, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(load_volume, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(export_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(strip_training_only, m)?)?;
    Ok(())
}
