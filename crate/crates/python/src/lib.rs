//! Python bindings: run configuration, datasets, checkpoints and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bayes_finetune::config::RunConfig;
use bayes_finetune::data::{self, DatasetSplit};
use bayes_finetune::evaluation::{self, VarianceStudyConfig};
use bayes_finetune::objectives::{self, PredictionSamples};
use bayes_finetune::training::{self, Checkpoint};
use bayes_finetune::{cli, Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Json(_) | Error::Shape(_) | Error::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let width = t.len() / t.shape()[0].max(1);
    t.data().chunks(width.max(1)).map(<[f64]>::to_vec).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Tensor::new([rows.len(), width], rows.concat()).map_err(py_err)
}

#[pyclass(name = "RunConfig", module = "bayes_finetune_py")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Parses a JSON configuration; missing keys take their defaults.
    #[new]
    #[pyo3(signature = (json = "{}"))]
    fn new(json: &str) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::from_json(json).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    /// Copy with every training and evaluation seed replaced.
    fn with_seed(&self, seed: u64) -> Self {
        Self { inner: self.inner.clone().with_seed(seed) }
    }

    fn train_split(&self) -> PyResult<PyDataset> {
        Ok(PyDataset { inner: cli::train_split(&self.inner).map_err(py_err)? })
    }

    fn test_split(&self) -> PyResult<PyDataset> {
        Ok(PyDataset { inner: cli::test_split(&self.inner).map_err(py_err)? })
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(version={})", self.inner.config_version)
    }
}

#[pyclass(name = "Dataset", module = "bayes_finetune_py")]
struct PyDataset {
    inner: DatasetSplit,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (n, noise_std = 0.15, seed = 0))]
    fn two_moons(n: usize, noise_std: f64, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: data::make_two_moons(n, noise_std, seed).map_err(py_err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (n, classes, spread = 1.0, seed = 0))]
    fn blobs(n: usize, classes: usize, spread: f64, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: data::make_blobs(n, classes, spread, seed).map_err(py_err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (n, classes, size = 8, seed = 0))]
    fn pattern_images(n: usize, classes: usize, size: usize, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: data::make_pattern_images(n, classes, size, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: DatasetSplit::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes
    }

    /// Full input shape `[N, ...]`.
    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.x.shape().to_vec()
    }

    /// Inputs flattened to one row per instance.
    fn inputs(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.x)
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.y.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset({}, shape={:?}, classes={})", self.inner.name, self.inner.x.shape(), self.inner.classes)
    }
}

#[pyclass(name = "Checkpoint", module = "bayes_finetune_py")]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    /// MAP training with the `model` and `pretrain` sections of `config`.
    #[staticmethod]
    fn pretrain(py: Python<'_>, config: &PyRunConfig, data: &PyDataset) -> PyResult<Self> {
        let (cfg, d) = (&config.inner, &data.inner);
        let inner = py.detach(|| training::pretrain_map(&cfg.model, &cfg.pretrain, d)).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Bayesian fine-tuning with the `finetune` section of `config`.
    fn finetune(&self, py: Python<'_>, config: &PyRunConfig, data: &PyDataset) -> PyResult<Self> {
        let (cfg, d, start) = (&config.inner, &data.inner, &self.inner);
        let inner = py.detach(|| training::bayes_finetune(start, &cfg.finetune, d)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load(&path).map_err(py_err)? })
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::from_bytes(bytes).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.inner.to_bytes().map_err(py_err)?))
    }

    #[getter]
    fn stage(&self) -> String {
        self.inner.meta.stage.clone()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.meta.config_hash.clone()
    }

    #[getter]
    fn is_deterministic(&self) -> bool {
        self.inner.model.is_deterministic()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.model.num_parameters()
    }

    /// Posterior-predictive mean probabilities and per-instance mutual information.
    #[pyo3(signature = (data, samples = 20, seed = 0))]
    fn predict(&self, data: &PyDataset, samples: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ps, mean) = objectives::posterior_predictive(&self.inner.model, &data.inner.x, samples, &mut rng)
            .map_err(py_err)?;
        Ok((rows(&mean), objectives::mutual_information(&ps).into_data()))
    }

    /// Test metrics and OOD average precision using the `eval` section of `config`.
    fn evaluate<'py>(&self, py: Python<'py>, config: &PyRunConfig, test: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
        let (normal, ood) = cli::predictions(&self.inner.model, &config.inner, &test.inner).map_err(py_err)?;
        let rep = evaluation::evaluate_predictions(&normal, &test.inner.y, &ood).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("top1", rep.top1)?;
        out.set_item("nll", rep.nll)?;
        out.set_item("ece", rep.ece)?;
        out.set_item("ap", rep.ap_per_ood_source.clone())?;
        out.set_item("bucket_accuracies", rep.bucket_accuracies.clone())?;
        out.set_item("mean_mi_normal", rep.mean_mi_normal)?;
        out.set_item("mean_mi_ood", rep.mean_mi_ood.clone())?;
        out.set_item("mean_entropy_normal", rep.mean_entropy_normal)?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint(stage={}, parameters={})", self.inner.meta.stage, self.inner.model.num_parameters())
    }
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, positive: Vec<bool>) -> PyResult<f64> {
    evaluation::average_precision(&scores, &positive).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (probs, labels, bins = 15))]
fn ece(probs: Vec<Vec<f64>>, labels: Vec<usize>, bins: usize) -> PyResult<f64> {
    evaluation::ece(&matrix(&probs)?, &labels, bins).map_err(py_err)
}

/// Mutual information per instance from probabilities shaped `[S][B][K]`.
#[pyfunction]
fn mutual_information(samples: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<f64>> {
    let s = samples.len();
    let b = samples.first().map_or(0, Vec::len);
    let k = samples.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if samples.iter().any(|m| m.len() != b || m.iter().any(|r| r.len() != k)) {
        return Err(PyValueError::new_err("samples must be a regular [S][B][K] array"));
    }
    let flat: Vec<f64> = samples.into_iter().flatten().flatten().collect();
    let ps = PredictionSamples::new(Tensor::new([s, b, k], flat).map_err(py_err)?).map_err(py_err)?;
    Ok(objectives::mutual_information(&ps).into_data())
}

/// Gradient-variance comparison of the standard and exemplar estimators.
#[pyfunction]
fn gradient_variance_study<'py>(py: Python<'py>, config: &PyRunConfig) -> PyResult<Bound<'py, PyDict>> {
    let cfg: VarianceStudyConfig = config.inner.variance_study;
    let rep = py.detach(|| evaluation::gradient_variance_study(&cfg)).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("var_standard_mu", rep.var_standard_mu)?;
    out.set_item("var_standard_psi", rep.var_standard_psi)?;
    out.set_item("var_exemplar_mu", rep.var_exemplar_mu)?;
    out.set_item("var_exemplar_psi", rep.var_exemplar_psi)?;
    out.set_item("ratio", rep.ratio)?;
    out.set_item("macs_standard", rep.macs_standard)?;
    out.set_item("macs_exemplar", rep.macs_exemplar)?;
    Ok(out)
}

#[pymodule]
fn bayes_finetune_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_variance_study, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
