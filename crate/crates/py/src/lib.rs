//! Python bindings: encoders, embedding schemes, the property analyzer and
//! the training harness. Structured results cross the boundary as JSON and
//! come back to Python as plain dicts.

use dhe::analysis::{self, AnalysisConfig, EncoderKind};
use dhe::data::{self, DataFormat, InteractionDataset};
use dhe::encoders::{DenseHashEncoder, Distribution};
use dhe::harness::{self, Model, SchemeSpec, TrainConfig};
use dhe::hashing::{self, HashFamily};
use dhe::schemes::{self, SchemeKind};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(err)
}

/// FNV-1a 64 of a string key.
#[pyfunction]
fn hash_string(key: &str) -> u64 {
    hashing::hash_string(key.as_bytes())
}

/// `k` universal hash buckets of `x` in `[0, m)`.
#[pyfunction]
#[pyo3(signature = (x, k, m, seed=0))]
fn hash_buckets(x: u64, k: usize, m: u64, seed: u64) -> PyResult<Vec<u64>> {
    Ok(HashFamily::new(seed, k, m).map_err(err)?.buckets(x))
}

/// `1 - exp(-n(n-1)/(2 buckets))`.
#[pyfunction]
fn closed_form_collision(n: f64, buckets: f64) -> f64 {
    analysis::closed_form_collision(n, buckets)
}

#[pyfunction]
fn auc(pos: Vec<f64>, neg: Vec<f64>) -> PyResult<f64> {
    dhe::recmodels::auc(&pos, &neg).map_err(err)
}

#[pyclass(name = "DenseHashEncoder", frozen)]
struct PyDenseHashEncoder {
    inner: DenseHashEncoder,
}

#[pymethods]
impl PyDenseHashEncoder {
    #[new]
    #[pyo3(signature = (k, m, seed=0, distribution="uniform"))]
    fn new(k: usize, m: u64, seed: u64, distribution: &str) -> PyResult<Self> {
        let dist = match distribution {
            "uniform" => Distribution::Uniform,
            "gaussian" => Distribution::Gaussian,
            other => return Err(err(format!("unknown distribution '{other}'"))),
        };
        Ok(Self {
            inner: DenseHashEncoder::from_seed(seed, k, m, dist).map_err(err)?,
        })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    fn encode(&self, x: u64) -> Vec<f64> {
        self.inner.encode(x).values
    }
}

/// An embedding scheme sized to a parameter budget.
#[pyclass(name = "Scheme", unsendable)]
struct PyScheme {
    inner: schemes::Scheme,
}

#[pymethods]
impl PyScheme {
    /// `budget_fraction` of the full `vocab_size × dim` table; `num_hashes`
    /// sets `k` for the hashing schemes.
    #[new]
    #[pyo3(signature = (kind, vocab_size, dim=32, budget_fraction=1.0, num_hashes=None, seed=0))]
    fn new(
        kind: &str,
        vocab_size: u64,
        dim: usize,
        budget_fraction: f64,
        num_hashes: Option<usize>,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = SchemeSpec {
            num_hashes,
            ..SchemeSpec::new(parse(kind)?)
        };
        let cfg = spec
            .resolve(vocab_size, dim, budget_fraction, 0, seed)
            .map_err(err)?;
        Ok(Self {
            inner: schemes::Scheme::new(&cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: schemes::Scheme::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().as_str()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn param_count(&self) -> u64 {
        self.inner.param_count()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.config())
    }

    fn embed(&self, x: u64) -> PyResult<Vec<f64>> {
        self.inner.embed(x).map_err(err)
    }

    fn embed_batch(&self, ids: Vec<u64>) -> PyResult<Vec<Vec<f64>>> {
        let m = self.inner.embed_batch(&ids).map_err(err)?;
        Ok(m.outer_iter().map(|r| r.to_vec()).collect())
    }
}

/// Property report for one encoder as a dict. Keyword arguments override
/// the analyzer defaults.
#[pyfunction]
#[pyo3(signature = (encoder, n=None, m=None, k=None, samples=None, seed=0))]
fn property_report<'py>(
    py: Python<'py>,
    encoder: &str,
    n: Option<u64>,
    m: Option<u64>,
    k: Option<usize>,
    samples: Option<usize>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = AnalysisConfig {
        seed,
        ..AnalysisConfig::default()
    };
    cfg.n = n.unwrap_or(cfg.n);
    cfg.m = m.unwrap_or(cfg.m);
    cfg.k = k.unwrap_or(cfg.k);
    cfg.samples = samples.unwrap_or(cfg.samples);
    let kind: EncoderKind = parse(encoder)?;
    let report = py
        .detach(|| analysis::property_report(kind, &cfg))
        .map_err(err)?;
    to_py(py, &report)
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: InteractionDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (path, format="tsv_triples", genres=None))]
    fn load(path: &str, format: &str, genres: Option<&str>) -> PyResult<Self> {
        let fmt: DataFormat = parse(format)?;
        let mut ds = data::load_interactions(path, fmt).map_err(err)?;
        if let Some(g) = genres {
            ds.item_features = Some(data::load_genres(g, &ds).map_err(err)?);
        }
        Ok(Self { inner: ds })
    }

    /// Builds a dataset from `(user, item, timestamp)` tuples of raw ids.
    #[staticmethod]
    fn from_triples(rows: Vec<(String, String, i64)>) -> Self {
        Self {
            inner: InteractionDataset::from_raw(&rows),
        }
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.n_users()
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.n_items()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Model::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    /// Logits for aligned user and item index lists.
    fn score(&self, users: Vec<u64>, items: Vec<u64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.score(&users, &items).map_err(err)?.to_vec())
    }

    fn param_counts<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.param_counts())
    }
}

/// Trains on the leave-last-two split. `config` is a training config as a
/// JSON string (missing fields take their defaults). Returns the run
/// record as a dict and the best model.
#[pyfunction]
#[pyo3(signature = (dataset, config="{}"))]
fn train<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    config: &str,
) -> PyResult<(Bound<'py, PyAny>, PyModel)> {
    let cfg: TrainConfig = serde_json::from_str(config).map_err(err)?;
    cfg.validate().map_err(err)?;
    let out = py
        .detach(|| harness::train(&dataset.inner, &cfg))
        .map_err(err)?;
    Ok((to_py(py, &out.result)?, PyModel { inner: out.model }))
}

#[pyfunction]
fn scheme_kinds() -> Vec<&'static str> {
    SchemeKind::ALL.iter().map(|k| k.as_str()).collect()
}

#[pymodule]
fn dhe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(hash_string, m)?)?;
    m.add_function(wrap_pyfunction!(hash_buckets, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form_collision, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(property_report, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(scheme_kinds, m)?)?;
    m.add_class::<PyDenseHashEncoder>()?;
    m.add_class::<PyScheme>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
