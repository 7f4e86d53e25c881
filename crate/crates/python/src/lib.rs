//! Python bindings for the cropcast library.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cropcast::forest::{self, ForestParams, MaxFeatures, RegressionForest};
use cropcast::mlp::{self, Activation, MlpHyper, MlpModel};
use cropcast::pipeline::{self, PipelineConfig};
use cropcast::season::FeatureDataset;
use cropcast::synth::{self, SynthConfig};
use cropcast::{io, report, seed, selection};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn dataset(x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<FeatureDataset> {
    let d = x.first().map_or(0, Vec::len);
    if x.len() != y.len() || x.iter().any(|r| r.len() != d) {
        return Err(value_err("x must be a rectangular list of rows, one per target"));
    }
    let n = x.len();
    Ok(FeatureDataset { feature_names: (0..d).map(|j| format!("x{j}")).collect(), x, y, pixel_index: (0..n).map(|i| (i, 0)).collect() })
}

/// Stage seed derived from a root seed and a label.
#[pyfunction]
fn derive_seed(root: u64, label: &str) -> u64 {
    seed::derive_seed(root, label)
}

/// Percent change from baseline to prediction.
#[pyfunction]
fn rate_of_change(baseline_t: f64, predicted_t: f64) -> PyResult<f64> {
    report::rate_of_change(baseline_t, predicted_t).map_err(value_err)
}

/// Rate with sign and two decimals, as written in reports.
#[pyfunction]
fn format_rate(rate: f64) -> String {
    report::format_rate(rate)
}

/// Percentage of the total held by each entry.
#[pyfunction]
fn share_of_total(totals: BTreeMap<String, f64>) -> PyResult<BTreeMap<String, f64>> {
    report::share_of_total(&totals).map_err(value_err)
}

/// Day of year the greenness first crosses its onset threshold, if any.
#[pyfunction]
fn detect_greenness_onset(ndvi: Vec<f64>, days: Vec<u32>) -> PyResult<Option<u32>> {
    if ndvi.len() != days.len() {
        return Err(value_err("ndvi and days differ in length"));
    }
    Ok(cropcast::season::detect_greenness_onset(&ndvi, &days))
}

/// Five priority crops per country from a commodity balance CSV.
#[pyfunction]
fn select_crops(balances_csv: PathBuf) -> PyResult<BTreeMap<String, Vec<String>>> {
    let records = io::read_commodity_table(&balances_csv).map_err(value_err)?;
    let sel = selection::select_all(&records).map_err(value_err)?;
    Ok(sel.into_iter().map(|s| (s.country, s.top5)).collect())
}

/// Write a synthetic scene into `dir`.
#[pyfunction]
#[pyo3(signature = (dir, seed=42, sigma=0.1))]
fn write_synthetic_scene(dir: PathBuf, seed: u64, sigma: f64) -> PyResult<()> {
    let cfg = SynthConfig { seed, noise_sigma: sigma, ..Default::default() };
    synth::write_scene(&cfg, &dir).map_err(value_err)?;
    Ok(())
}

fn manifest(cfg: &PipelineConfig, py: Python<'_>) -> PyResult<Vec<(String, String, u64)>> {
    let entries = py.detach(|| pipeline::run_pipeline(cfg)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(entries.into_iter().map(|e| (e.path, e.sha256, e.bytes)).collect())
}

/// Run every stage of a configured pipeline; returns (path, sha256, bytes) per artifact.
#[pyfunction]
#[pyo3(signature = (config, out=None))]
fn run_pipeline(py: Python<'_>, config: PathBuf, out: Option<PathBuf>) -> PyResult<Vec<(String, String, u64)>> {
    let mut cfg = PipelineConfig::load(&config).map_err(value_err)?;
    if let Some(o) = out {
        cfg.paths.out = std::path::absolute(&o).unwrap_or(o);
    }
    manifest(&cfg, py)
}

/// Run the pipeline on a scene written by `write_synthetic_scene` with the same seed and sigma.
#[pyfunction]
#[pyo3(signature = (scene_dir, out, seed=42, sigma=0.1))]
fn run_synthetic(py: Python<'_>, scene_dir: PathBuf, out: PathBuf, seed: u64, sigma: f64) -> PyResult<Vec<(String, String, u64)>> {
    let scfg = SynthConfig { seed, noise_sigma: sigma, ..Default::default() };
    let cfg = pipeline::config_for_scene(&scfg, &scene_dir, &out);
    manifest(&cfg, py)
}

/// Random forest regressor.
#[pyclass(module = "cropcast_py")]
struct Forest {
    inner: RegressionForest,
}

#[pymethods]
impl Forest {
    #[new]
    #[pyo3(signature = (x, y, n_trees=100, max_depth=12, min_leaf=2, bootstrap=true, max_features="sqrt", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
        n_trees: usize,
        max_depth: usize,
        min_leaf: usize,
        bootstrap: bool,
        max_features: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let max_features = match max_features {
            "sqrt" => MaxFeatures::Sqrt,
            "all" => MaxFeatures::All,
            other => return Err(value_err(format!("max_features must be 'sqrt' or 'all', got {other:?}"))),
        };
        let params = ForestParams { n_trees, max_depth, min_leaf, bootstrap, max_features };
        let inner = py.detach(|| forest::fit_forest(&x, &y, &params, seed)).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<f64> {
        forest::predict_forest(&self.inner, &x).map_err(value_err)
    }

    fn predict_many(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        x.iter().map(|r| forest::predict_forest(&self.inner, r).map_err(value_err)).collect()
    }

    #[getter]
    fn n_trees(&self) -> usize {
        self.inner.trees.len()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }
}

/// Feed-forward production model trained with early stopping.
#[pyclass(module = "cropcast_py")]
struct Mlp {
    inner: MlpModel,
}

#[pymethods]
impl Mlp {
    #[new]
    #[pyo3(signature = (
        x_train, y_train, x_val, y_val, hidden=vec![32, 32], activation="relu",
        learning_rate=1e-3, batch_size=32, max_epochs=500, patience=20, seed=0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        py: Python<'_>,
        x_train: Vec<Vec<f64>>,
        y_train: Vec<f64>,
        x_val: Vec<Vec<f64>>,
        y_val: Vec<f64>,
        hidden: Vec<usize>,
        activation: &str,
        learning_rate: f64,
        batch_size: usize,
        max_epochs: usize,
        patience: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let activation = match activation {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            other => return Err(value_err(format!("activation must be 'relu' or 'tanh', got {other:?}"))),
        };
        let hyper = MlpHyper { hidden, activation, learning_rate, batch_size, max_epochs, patience };
        let train = dataset(x_train, y_train)?;
        let val = if x_val.is_empty() { train.subset(&[]) } else { dataset(x_val, y_val)? };
        let inner = py.detach(|| mlp::train_mlp(&train, &val, &hyper, seed)).map_err(|e| match e {
            mlp::ModelError::DivergenceDetected { .. } => PyRuntimeError::new_err(e.to_string()),
            e => value_err(e),
        })?;
        Ok(Self { inner })
    }

    /// Production in tonnes, never negative.
    fn predict(&self, x: Vec<f64>) -> PyResult<f64> {
        mlp::predict_mlp(&self.inner, &x).map_err(value_err)
    }

    fn predict_many(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        mlp::predict_batch(&self.inner, &x).map_err(value_err)
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.inner.best_epoch
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }
}

#[pymodule]
pub fn cropcast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(rate_of_change, m)?)?;
    m.add_function(wrap_pyfunction!(format_rate, m)?)?;
    m.add_function(wrap_pyfunction!(share_of_total, m)?)?;
    m.add_function(wrap_pyfunction!(detect_greenness_onset, m)?)?;
    m.add_function(wrap_pyfunction!(select_crops, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_scene, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(run_synthetic, m)?)?;
    m.add_class::<Forest>()?;
    m.add_class::<Mlp>()?;
    Ok(())
}
