//! Python module `dhn`: datasets, training, prediction and metrics.
//!
//! Matrices cross the boundary as lists of row lists.

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dhn_core::data::{self, DataKind, GenConfig, GroundTruth, Schema, SplitIndex, TruthParams};
use dhn_core::model::{self, Ablation, DhnConfig};
use dhn_core::{metrics, DhnError};

fn to_py(err: DhnError) -> PyErr {
    if err.is_numerical() {
        PyRuntimeError::new_err(err.to_string())
    } else {
        PyValueError::new_err(err.to_string())
    }
}

fn to_array(rows: Vec<Vec<f64>>, width: Option<usize>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(width.unwrap_or(0), Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Feature and label matrices with a label kind.
#[pyclass(name = "Dataset", module = "dhn", frozen)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (features, labels, kind = "continuous"))]
    fn new(features: Vec<Vec<f64>>, labels: Vec<Vec<f64>>, kind: &str) -> PyResult<Self> {
        let kind: DataKind = kind.parse().map_err(to_py)?;
        let x = to_array(features, None)?;
        let y = to_array(labels, None)?;
        let inner = data::Dataset::new(x, y, kind, None, None).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_csv(path: &str, schema: &str) -> PyResult<Self> {
        let schema = Schema::load(schema).map_err(to_py)?;
        let inner = data::load_csv(path, &schema).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        self.inner.write_csv(path).map_err(to_py)
    }

    #[getter]
    fn n_rows(&self) -> usize {
        self.inner.n_rows()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn n_targets(&self) -> usize {
        self.inner.n_targets()
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().to_string()
    }

    fn nonzero_fraction(&self) -> f64 {
        self.inner.nonzero_fraction()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.features())
    }

    fn labels(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.labels())
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(rows={}, features={}, targets={}, kind='{}')",
            self.inner.n_rows(),
            self.inner.n_features(),
            self.inner.n_targets(),
            self.inner.kind()
        )
    }
}

/// A trained (or freshly initialised) hurdle network.
#[pyclass(name = "Model", module = "dhn", frozen)]
struct PyModel {
    inner: model::DhnModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: model::DhnModel::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    /// Returns `(probabilities, expected)` for raw feature rows.
    fn predict(&self, features: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let x = to_array(features, Some(self.inner.config().n_features))?;
        let p = self.inner.predict(&x).map_err(to_py)?;
        Ok((to_rows(&p.probabilities), to_rows(&p.expected)))
    }

    /// Effective configuration as JSON.
    fn config_json(&self) -> String {
        self.inner.config().to_json()
    }

    /// Model file contents.
    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

/// Samples a synthetic dataset from the hurdle process.
#[pyfunction]
#[pyo3(signature = (n, m, l, kind = "continuous", seed = 0, strength = 0.7, probit_signal = 5.0, abundance_signal = 1.5))]
#[allow(clippy::too_many_arguments)]
fn synth(
    n: usize,
    m: usize,
    l: usize,
    kind: &str,
    seed: u64,
    strength: f64,
    probit_signal: f64,
    abundance_signal: f64,
) -> PyResult<PyDataset> {
    if n == 0 || m == 0 || l == 0 {
        return Err(PyValueError::new_err("n, m and l must be positive"));
    }
    let params = TruthParams {
        strength,
        probit_signal,
        abundance_signal,
        ..TruthParams::default()
    };
    params.validate().map_err(to_py)?;
    let kind: DataKind = kind.parse().map_err(to_py)?;
    let truth = GroundTruth::random(m, l, &params, seed);
    let (inner, _) = data::generate_synthetic(&GenConfig {
        n,
        kind,
        seed,
        truth,
    })
    .map_err(to_py)?;
    Ok(PyDataset { inner })
}

/// Trains on a seeded 70/15/15 split; returns the model and the per-epoch
/// validation NLL.
#[pyfunction]
#[pyo3(signature = (dataset, epochs = 100, batch_size = 128, k_train = 64, k_eval = 1024,
    learning_rate = 1e-3, seed = 0, ablation = "full", encoder_dims = vec![512, 256],
    latent_dim = 256, head_hidden_dim = 256, cov_penalty = None))]
#[allow(clippy::too_many_arguments)]
fn train(
    dataset: &PyDataset,
    epochs: usize,
    batch_size: usize,
    k_train: usize,
    k_eval: usize,
    learning_rate: f64,
    seed: u64,
    ablation: &str,
    encoder_dims: Vec<usize>,
    latent_dim: usize,
    head_hidden_dim: usize,
    cov_penalty: Option<f64>,
) -> PyResult<(PyModel, Vec<f64>)> {
    let d = &dataset.inner;
    let ablation: Ablation = ablation.parse().map_err(to_py)?;
    let mut config = DhnConfig::new(d.n_features(), d.n_targets(), d.kind());
    config.encoder_dims = encoder_dims;
    config = config.with_ablation(ablation);
    if let Some(w) = cov_penalty {
        config.cov_penalty = w;
    }
    config.latent_dim = latent_dim;
    config.head_hidden_dim = head_hidden_dim;
    config.epochs = epochs;
    config.batch_size = batch_size;
    config.k_train = k_train;
    config.k_eval = k_eval;
    config.optimizer.learning_rate = learning_rate;
    config.seed = seed;
    let split = SplitIndex::new(d.n_rows(), seed).map_err(to_py)?;
    let (inner, report) = model::train(d, &split, &config).map_err(|e| to_py(e.into_error()))?;
    Ok((PyModel { inner }, report.val_curve()))
}

/// Scores a model on the seeded test split; returns a dict of metrics.
#[pyfunction]
#[pyo3(signature = (model, dataset, alpha = 0.5))]
fn evaluate(
    py: Python<'_>,
    model: &PyModel,
    dataset: &PyDataset,
    alpha: f64,
) -> PyResult<Py<pyo3::types::PyDict>> {
    let split =
        SplitIndex::new(dataset.inner.n_rows(), model.inner.config().seed).map_err(to_py)?;
    let r = metrics::evaluate(&model.inner, &dataset.inner, &split, alpha).map_err(to_py)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("acc", r.acc)?;
    d.set_item("zrmse", r.zrmse)?;
    d.set_item("alpha", r.alpha)?;
    d.set_item("test_nll", r.test_nll)?;
    d.set_item("rows", r.rows)?;
    d.set_item("per_target", r.per_target)?;
    d.set_item("excluded", r.excluded)?;
    Ok(d.unbind())
}

/// Mean per-target Pearson correlation over non-constant targets.
#[pyfunction]
fn acc(actual: Vec<Vec<f64>>, predicted: Vec<Vec<f64>>) -> PyResult<f64> {
    let r = metrics::acc(&to_array(actual, None)?, &to_array(predicted, None)?).map_err(to_py)?;
    Ok(r.acc)
}

/// Zero-inflated RMSE with weight `alpha` on the true-zero part.
#[pyfunction]
#[pyo3(signature = (actual, predicted, alpha = 0.5))]
fn zrmse(actual: Vec<Vec<f64>>, predicted: Vec<Vec<f64>>, alpha: f64) -> PyResult<f64> {
    metrics::zrmse(&to_array(actual, None)?, &to_array(predicted, None)?, alpha).map_err(to_py)
}

/// `log Φ(x)`.
#[pyfunction]
fn log_norm_cdf(x: f64) -> PyResult<f64> {
    dhn_core::probcore::log_std_normal_cdf(x).map_err(to_py)
}

#[pymodule]
fn dhn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(acc, m)?)?;
    m.add_function(wrap_pyfunction!(zrmse, m)?)?;
    m.add_function(wrap_pyfunction!(log_norm_cdf, m)?)?;
    Ok(())
}
