//! Python bindings for the prototype-quantization stack.
//!
//! The module mirrors the library's main entry points: dataset generation
//! and binary IO ([`Dataset`]), configuration with override checking
//! ([`Config`]), training and evaluation ([`train`] / [`Model`]), the grid
//! harnesses, the finite-difference gradient suite, and the 2-D projection.
//! Structured results cross the boundary as plain dicts and lists so the
//! Python side needs no wrapper types; numeric values round-trip bit-exactly.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyAttributeError, PyIOError, PyTypeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList};
use pyo3::IntoPyObjectExt;

use pcq_core::datasim::{
    few_shot_split, generate_dataset, read_embeddings, write_embeddings, DatasetSpec,
    LabeledFeatures,
};
use pcq_core::diffcore::DenseMatrix;
use pcq_core::evalkit::{self, classify, evaluate, gradient_suite, project_2d, HarnessResult};
use pcq_core::model::{forward, LossSelect};
use pcq_core::quantizer::sample_uniform_noise;
use pcq_core::rng::stream;
use pcq_core::trainer::{load_checkpoint, save_checkpoint, TrainConfig, TrainState};
use pcq_core::Error as CoreError;

fn core_err(e: CoreError) -> PyErr {
    match e {
        CoreError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    match v {
        Value::Null => Ok(py.None()),
        Value::Bool(b) => b.into_py_any(py),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py_any(py)
            } else if let Some(u) = n.as_u64() {
                u.into_py_any(py)
            } else {
                n.as_f64().into_py_any(py)
            }
        }
        Value::String(s) => s.into_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py_any(py)
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (key, val) in map {
                dict.set_item(key, json_to_py(py, val)?)?;
            }
            dict.into_py_any(py)
        }
    }
}

fn py_to_json(v: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    use serde_json::Value;
    // Bool first: Python bools extract as integers otherwise.
    if let Ok(b) = v.cast::<PyBool>() {
        return Ok(Value::Bool(b.is_true()));
    }
    if let Ok(i) = v.extract::<i64>() {
        return Ok(Value::from(i));
    }
    if let Ok(f) = v.extract::<f64>() {
        return serde_json::Number::from_f64(f)
            .map(Value::Number)
            .ok_or_else(|| PyValueError::new_err(format!("non-finite config value {f}")));
    }
    if let Ok(s) = v.extract::<String>() {
        return Ok(Value::String(s));
    }
    Err(PyTypeError::new_err(format!(
        "unsupported config value of type {}",
        v.get_type().name()?
    )))
}

fn serialize_to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let json = serde_json::to_value(value)
        .map_err(|e| PyValueError::new_err(format!("serialization failed: {e}")))?;
    json_to_py(py, &json)
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(&rows).map_err(core_err)
}

fn matrix_to_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows).map(|i| m.row(i).to_vec()).collect()
}

/// Training configuration. Starts from the desk-scale defaults; keyword
/// overrides must name existing keys and pass validation.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: TrainConfig,
}

impl PyConfig {
    fn resolved(&self) -> PyResult<serde_json::Map<String, serde_json::Value>> {
        match serde_json::to_value(&self.inner) {
            Ok(serde_json::Value::Object(map)) => Ok(map),
            _ => Err(PyValueError::new_err("config did not serialize to a map")),
        }
    }
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut map = PyConfig {
            inner: TrainConfig::default_desk(),
        }
        .resolved()?;
        if let Some(overrides) = overrides {
            for (key, value) in overrides.iter() {
                let key: String = key.extract()?;
                if !map.contains_key(&key) {
                    return Err(PyValueError::new_err(format!("unknown config key {key:?}")));
                }
                map.insert(key, py_to_json(&value)?);
            }
        }
        let inner: TrainConfig = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(core_err)?;
        Ok(PyConfig { inner })
    }

    /// Every resolved key as a plain dict.
    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        serialize_to_py(py, &self.inner)
    }

    fn replace(&self, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut map = self.resolved()?;
        if let Some(overrides) = overrides {
            for (key, value) in overrides.iter() {
                let key: String = key.extract()?;
                if !map.contains_key(&key) {
                    return Err(PyValueError::new_err(format!("unknown config key {key:?}")));
                }
                map.insert(key, py_to_json(&value)?);
            }
        }
        let inner: TrainConfig = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(core_err)?;
        Ok(PyConfig { inner })
    }

    fn __getattr__(&self, py: Python<'_>, name: &str) -> PyResult<Py<PyAny>> {
        match self.resolved()?.get(name) {
            Some(v) => json_to_py(py, v),
            None => Err(PyAttributeError::new_err(format!(
                "Config has no key {name:?}"
            ))),
        }
    }

    fn __repr__(&self) -> PyResult<String> {
        let json = serde_json::to_string(&self.inner)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(format!("Config({json})"))
    }
}

/// Unit-norm feature rows with 1-based integer labels.
#[pyclass(name = "Dataset", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: LabeledFeatures,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(features: Vec<Vec<f64>>, labels: Vec<u16>) -> PyResult<Self> {
        let features = matrix_from_rows(features)?;
        if features.rows != labels.len() {
            return Err(PyValueError::new_err(format!(
                "{} feature rows but {} labels",
                features.rows,
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().position(|&l| l == 0) {
            return Err(PyValueError::new_err(format!(
                "label at row {bad} is 0; labels are 1-based"
            )));
        }
        Ok(PyDataset {
            inner: LabeledFeatures { features, labels },
        })
    }

    /// Synthetic classes: seeded mean placement with a pairwise angle floor,
    /// angular Gaussian noise, unit-norm rows.
    #[staticmethod]
    #[pyo3(signature = (classes=10, dim=32, per_class=200, intra_spread=0.35, inter_separation=0.6, seed=0))]
    fn generate(
        classes: usize,
        dim: usize,
        per_class: usize,
        intra_spread: f64,
        inter_separation: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = DatasetSpec {
            k: classes,
            d: dim,
            n_per_class: per_class,
            intra_spread,
            inter_separation,
            seed,
        };
        Ok(PyDataset {
            inner: generate_dataset(&spec).map_err(core_err)?,
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: read_embeddings(&path).map_err(core_err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_embeddings(&path, &self.inner).map_err(core_err)
    }

    /// Seeded per-class split into (train, test) with `shots` rows per class.
    fn split(&self, shots: usize, seed: u64) -> PyResult<(Self, Self)> {
        let (train, test) = few_shot_split(&self.inner, shots, seed).map_err(core_err)?;
        Ok((PyDataset { inner: train }, PyDataset { inner: test }))
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.inner.features)
    }

    #[getter]
    fn labels(&self) -> Vec<u16> {
        self.inner.labels.clone()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.d()
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, dim={}, classes={})",
            self.inner.n(),
            self.inner.d(),
            self.inner.k()
        )
    }
}

/// A trained model: parameters, config, and the per-epoch loss history.
#[pyclass(name = "Model")]
struct PyModel {
    state: TrainState,
}

#[pymethods]
impl PyModel {
    /// Accuracy, prototype assignment accuracy, per-class accuracy,
    /// confusion matrix, assignment entropy, and loss terms as a dict.
    fn evaluate(&self, py: Python<'_>, data: &PyDataset) -> PyResult<Py<PyAny>> {
        let report =
            evaluate(&self.state.params, &self.state.config, &data.inner).map_err(core_err)?;
        serialize_to_py(py, &report)
    }

    /// Predicted 1-based labels for raw feature rows.
    fn predict(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<u16>> {
        let features = matrix_from_rows(features)?;
        let config = &self.state.config;
        let noise = if config.eval_noise {
            let mut rng = stream(config.seed, "eval-noise");
            Some(sample_uniform_noise(
                features.rows,
                self.state.k,
                &mut rng,
            ))
        } else {
            None
        };
        // Labels feed only the loss terms, not the fused features.
        let dummy = vec![1u16; features.rows];
        let out = forward(
            &self.state.params,
            config,
            &features,
            &dummy,
            noise.as_ref(),
            false,
            LossSelect::Total,
        )
        .map_err(core_err)?;
        classify(&out.fused, &out.prototypes).map_err(core_err)
    }

    /// Per-epoch loss history as a list of dicts.
    fn history(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        serialize_to_py(py, &self.state.history)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.state.config.clone(),
        }
    }

    /// Named parameter matrices as a dict of row lists.
    fn parameters(&self) -> BTreeMap<String, Vec<Vec<f64>>> {
        self.state
            .params
            .named()
            .into_iter()
            .map(|(name, m)| (name, matrix_to_rows(m)))
            .collect()
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&dir)?;
        save_checkpoint(&self.state, &dir).map_err(core_err)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            state: load_checkpoint(&dir).map_err(core_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(classes={}, dim={}, steps={})",
            self.state.k, self.state.d, self.state.step
        )
    }
}

#[pyfunction]
fn train(config: &PyConfig, data: &PyDataset) -> PyResult<PyModel> {
    let state = pcq_core::trainer::train(&config.inner, &data.inner).map_err(core_err)?;
    Ok(PyModel { state })
}

fn harness_to_py(py: Python<'_>, result: HarnessResult) -> PyResult<Py<PyAny>> {
    serialize_to_py(py, &result)
}

#[pyfunction]
#[pyo3(signature = (config, data, taus, seeds=vec![0, 1, 2], shots=4, workers=0))]
fn temperature_sweep(
    py: Python<'_>,
    config: &PyConfig,
    data: &PyDataset,
    taus: Vec<f64>,
    seeds: Vec<u64>,
    shots: usize,
    workers: usize,
) -> PyResult<Py<PyAny>> {
    let result = evalkit::temperature_sweep(&config.inner, &taus, &data.inner, &seeds, shots, workers)
        .map_err(core_err)?;
    harness_to_py(py, result)
}

#[pyfunction]
#[pyo3(signature = (config, data, seeds=vec![0, 1, 2], shots=4, workers=0))]
fn loss_ablation(
    py: Python<'_>,
    config: &PyConfig,
    data: &PyDataset,
    seeds: Vec<u64>,
    shots: usize,
    workers: usize,
) -> PyResult<Py<PyAny>> {
    let result =
        evalkit::loss_ablation(&config.inner, &data.inner, &seeds, shots, workers).map_err(core_err)?;
    harness_to_py(py, result)
}

#[pyfunction]
#[pyo3(signature = (config, data, seeds=vec![0, 1, 2], shots=4, workers=0))]
fn strategy_compare(
    py: Python<'_>,
    config: &PyConfig,
    data: &PyDataset,
    seeds: Vec<u64>,
    shots: usize,
    workers: usize,
) -> PyResult<Py<PyAny>> {
    let result = evalkit::strategy_compare(&config.inner, &data.inner, &seeds, shots, workers)
        .map_err(core_err)?;
    harness_to_py(py, result)
}

#[pyfunction]
#[pyo3(signature = (config, data, seeds=vec![0, 1, 2], shots=4, workers=0))]
fn prompt_ablation(
    py: Python<'_>,
    config: &PyConfig,
    data: &PyDataset,
    seeds: Vec<u64>,
    shots: usize,
    workers: usize,
) -> PyResult<Py<PyAny>> {
    let result = evalkit::prompt_ablation(&config.inner, &data.inner, &seeds, shots, workers)
        .map_err(core_err)?;
    harness_to_py(py, result)
}

#[pyfunction]
#[pyo3(signature = (config, classes=10, dim=32, per_class=200, intra_spread=0.35, inter_separation=0.6, data_seed=0, shot_grid=vec![1, 2, 4, 8, 16], seeds=vec![0, 1, 2], workers=0))]
#[allow(clippy::too_many_arguments)]
fn fewshot_curve(
    py: Python<'_>,
    config: &PyConfig,
    classes: usize,
    dim: usize,
    per_class: usize,
    intra_spread: f64,
    inter_separation: f64,
    data_seed: u64,
    shot_grid: Vec<usize>,
    seeds: Vec<u64>,
    workers: usize,
) -> PyResult<Py<PyAny>> {
    let spec = DatasetSpec {
        k: classes,
        d: dim,
        n_per_class: per_class,
        intra_spread,
        inter_separation,
        seed: data_seed,
    };
    let result = evalkit::fewshot_curve(&config.inner, &spec, &shot_grid, &seeds, workers)
        .map_err(core_err)?;
    harness_to_py(py, result)
}

/// Analytic gradients versus central differences for every loss term over
/// ten small configurations; each entry carries its `max_rel_err`.
#[pyfunction]
fn gradient_check(py: Python<'_>) -> PyResult<Py<PyAny>> {
    let entries = gradient_suite().map_err(core_err)?;
    serialize_to_py(py, &entries)
}

/// PCA onto the top two principal axes; rows come back as [x, y] pairs.
#[pyfunction]
fn project_points(points: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let m = matrix_from_rows(points)?;
    let coords = project_2d(&m).map_err(core_err)?;
    Ok(matrix_to_rows(&coords))
}

#[pymodule]
fn pcq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(temperature_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(loss_ablation, m)?)?;
    m.add_function(wrap_pyfunction!(strategy_compare, m)?)?;
    m.add_function(wrap_pyfunction!(prompt_ablation, m)?)?;
    m.add_function(wrap_pyfunction!(fewshot_curve, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(project_points, m)?)?;
    Ok(())
}
