//! Python bindings. Matrices cross the boundary as lists of rows and
//! settings as keyword arguments; reports come back as dicts.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyList, PyString, PyTuple};
use serde_json::{Map, Value};

use rac_core::corpus::{self, generate_synthetic as generate, write_documents, Document, SyntheticConfig};
use rac_core::metrics::{self, LabelMatrix, MacroAxis, ReportMode, ScoreMatrix};
use rac_core::model::RacModel;
use rac_core::pipeline::{self, DataManifest, Dataset, TrainRequest};
use rac_core::training::TrainConfig;

fn err(e: rac_core::Error) -> PyErr {
    match e {
        rac_core::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_json(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    if obj.is_none() {
        Ok(Value::Null)
    } else if obj.is_instance_of::<PyBool>() {
        Ok(Value::Bool(obj.extract()?))
    } else if obj.is_instance_of::<PyInt>() {
        Ok(Value::from(obj.extract::<i64>()?))
    } else if obj.is_instance_of::<PyFloat>() {
        Ok(Value::from(obj.extract::<f64>()?))
    } else if obj.is_instance_of::<PyString>() {
        Ok(Value::String(obj.extract()?))
    } else if obj.is_instance_of::<PyList>() || obj.is_instance_of::<PyTuple>() {
        obj.try_iter()?.map(|x| to_json(&x?)).collect::<PyResult<Vec<_>>>().map(Value::Array)
    } else if let Ok(d) = obj.cast::<PyDict>() {
        let mut m = Map::new();
        for (k, v) in d.iter() {
            m.insert(k.extract::<String>()?, to_json(&v)?);
        }
        Ok(Value::Object(m))
    } else {
        Err(PyValueError::new_err(format!("unsupported setting value {obj}")))
    }
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => PyList::new(py, a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?)?.into_any(),
        Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn serialized<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &serde_json::to_value(value).map_err(json_err)?)
}

/// Applies keyword settings over `template`'s fields; unknown keys are errors.
fn with_settings<T: serde::Serialize + serde::de::DeserializeOwned>(
    template: &T,
    kwargs: Option<&Bound<'_, PyDict>>,
    extra: &[&str],
) -> PyResult<(T, Map<String, Value>)> {
    let Value::Object(mut fields) = serde_json::to_value(template).map_err(json_err)? else {
        unreachable!("settings are JSON objects")
    };
    let mut rest = Map::new();
    if let Some(kw) = kwargs {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            let value = to_json(&v)?;
            if fields.contains_key(&key) {
                fields.insert(key, value);
            } else if extra.contains(&key.as_str()) {
                rest.insert(key, value);
            } else {
                return Err(PyValueError::new_err(format!("unknown setting `{key}`")));
            }
        }
    }
    Ok((serde_json::from_value(Value::Object(fields)).map_err(json_err)?, rest))
}

fn score_matrix(rows: Vec<Vec<f64>>) -> PyResult<ScoreMatrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows differ in length"));
    }
    ScoreMatrix::new(rows.len(), cols, rows.concat()).map_err(err)
}

fn label_matrix(rows: Vec<Vec<u8>>) -> PyResult<LabelMatrix> {
    if rows.is_empty() {
        return LabelMatrix::new(0, 0, vec![]).map_err(err);
    }
    LabelMatrix::from_rows(&rows).map_err(err)
}

fn axis(name: &str) -> PyResult<MacroAxis> {
    match name {
        "label" => Ok(MacroAxis::Label),
        "document" => Ok(MacroAxis::Document),
        _ => Err(PyValueError::new_err("axis must be \"label\" or \"document\"")),
    }
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    corpus::tokenize(text)
}

#[pyclass(module = "rac")]
struct Vocabulary {
    inner: corpus::Vocabulary,
}

#[pymethods]
impl Vocabulary {
    #[new]
    #[pyo3(signature = (texts, min_count = 10))]
    fn new(texts: Vec<String>, min_count: usize) -> PyResult<Self> {
        let inner = corpus::Vocabulary::from_texts(texts.iter().map(String::as_str), min_count).map_err(err)?;
        Ok(Vocabulary { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Vocabulary {
            inner: corpus::Vocabulary::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn encode(&self, text: &str) -> Vec<usize> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<usize>) -> Vec<String> {
        self.inner.decode(&ids)
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Writes documents.jsonl, codes.tsv and splits.json into `out_dir`.
/// Keyword arguments override generator settings (n_docs, n_codes, seed, …).
#[pyfunction]
#[pyo3(signature = (out_dir, **settings))]
fn generate_synthetic<'py>(py: Python<'py>, out_dir: PathBuf, settings: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyAny>> {
    let (config, _) = with_settings(&SyntheticConfig::default(), settings, &[])?;
    let data = generate(&config).map_err(err)?;
    std::fs::create_dir_all(&out_dir)?;
    write_documents(out_dir.join("documents.jsonl"), &data.documents).map_err(err)?;
    data.code_table.write_tsv(out_dir.join("codes.tsv")).map_err(err)?;
    data.splits.save(out_dir.join("splits.json")).map_err(err)?;
    serialized(py, &data.splits)
}

/// Builds the training-split vocabulary; returns the data manifest.
#[pyfunction]
#[pyo3(signature = (documents, codes, splits, out_dir, min_count = 10))]
fn preprocess<'py>(
    py: Python<'py>,
    documents: PathBuf,
    codes: PathBuf,
    splits: PathBuf,
    out_dir: PathBuf,
    min_count: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let m = pipeline::preprocess(&documents, &codes, &splits, min_count, &out_dir).map_err(err)?;
    serialized(py, &m)
}

fn open(data: &Path) -> PyResult<Dataset> {
    let file = if data.is_dir() { data.join(pipeline::MANIFEST_FILE) } else { data.to_path_buf() };
    DataManifest::load(file).and_then(|m| m.open()).map_err(err)
}

fn documents<'d>(ds: &'d Dataset, split: &str) -> PyResult<&'d [Document]> {
    match split {
        "train" => Ok(&ds.splits.train),
        "val" => Ok(&ds.splits.val),
        "test" => Ok(&ds.splits.test),
        _ => Err(PyValueError::new_err("split must be train, val or test")),
    }
}

/// Trains on a preprocessed dataset and saves `model.ckpt` (plus
/// `model_swa.ckpt` when weights were averaged) to `out_dir`. Keyword
/// arguments are model and training settings. Returns the training log.
#[pyfunction]
#[pyo3(signature = (data, out_dir, **settings))]
fn train<'py>(py: Python<'py>, data: PathBuf, out_dir: PathBuf, settings: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyAny>> {
    let ds = open(&data)?;
    let model_defaults = rac_core::model::RacConfig::new(ds.vocab.len(), ds.table.len());
    let train_keys: Vec<String> = match serde_json::to_value(TrainConfig::default()).map_err(json_err)? {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!(),
    };
    let train_refs: Vec<&str> = train_keys.iter().map(String::as_str).collect();
    let (model_config, rest) = with_settings(&model_defaults, settings, &train_refs)?;
    let rest_dict = PyDict::new(py);
    for (k, v) in &rest {
        rest_dict.set_item(k, to_py(py, v)?)?;
    }
    let (train_config, _) = with_settings(&TrainConfig::default(), Some(&rest_dict), &[])?;
    let run = py
        .detach(|| {
            pipeline::run_training(
                TrainRequest {
                    dataset: &ds,
                    model_config,
                    train_config,
                    embeddings: None,
                    train_documents: None,
                },
                |_| {},
            )
        })
        .map_err(err)?;
    std::fs::create_dir_all(&out_dir)?;
    let (vfp, tfp) = (ds.vocab.fingerprint(), run.titles.fingerprint());
    run.outcome.best.save(out_dir.join("model.ckpt"), &vfp, &tfp).map_err(err)?;
    if let Some(swa) = &run.outcome.swa {
        swa.save(out_dir.join("model_swa.ckpt"), &vfp, &tfp).map_err(err)?;
    }
    serialized(py, &run.outcome.log.without_timing())
}

/// A trained model bound to the dataset whose vocabulary and codes it uses.
#[pyclass(module = "rac")]
struct Model {
    model: RacModel,
    dataset: Dataset,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf, data: PathBuf) -> PyResult<Self> {
        let dataset = open(&data)?;
        let (model, sidecar) = RacModel::load(&path).map_err(err)?;
        if sidecar.vocab_fingerprint != dataset.vocab.fingerprint() {
            return Err(PyValueError::new_err("model and dataset vocabularies differ"));
        }
        Ok(Model { model, dataset })
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialized(py, &self.model.config)
    }

    fn parameter_count(&self) -> usize {
        self.model.params.parameter_count()
    }

    fn codes(&self) -> Vec<String> {
        self.dataset.table.codes().map(str::to_string).collect()
    }

    /// Probabilities for each text, one row per text in code-table order.
    fn predict(&self, py: Python<'_>, texts: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let docs: Vec<Document> = texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| Document {
                id: i.to_string(),
                text,
                codes: Default::default(),
            })
            .collect();
        let scores = py
            .detach(|| pipeline::score_documents(&self.model, &docs, &self.dataset.vocab, &self.dataset.table))
            .map_err(err)?;
        Ok((0..scores.scores.rows()).map(|i| scores.scores.row(i).to_vec()).collect())
    }

    /// Ranking report on one split of the bound dataset.
    #[pyo3(signature = (split = "test"))]
    fn evaluate<'py>(&self, py: Python<'py>, split: &str) -> PyResult<Bound<'py, PyAny>> {
        let docs = documents(&self.dataset, split)?;
        let report = py
            .detach(|| {
                let s = pipeline::score_documents(&self.model, docs, &self.dataset.vocab, &self.dataset.table)?;
                pipeline::evaluate_scores(&s, docs, &self.dataset.table)
            })
            .map_err(err)?;
        serialized(py, &report)
    }
}

#[pyfunction]
#[pyo3(signature = (scores, labels, threshold = metrics::DEFAULT_THRESHOLD))]
fn f1(scores: Vec<Vec<f64>>, labels: Vec<Vec<u8>>, threshold: f64) -> PyResult<(f64, f64)> {
    let f = metrics::f1(&score_matrix(scores)?, &label_matrix(labels)?, threshold).map_err(err)?;
    Ok((f.macro_f1, f.micro_f1))
}

/// `(macro, micro, skipped_labels)`; AUCs are `None` when undefined.
#[pyfunction]
fn auc(scores: Vec<Vec<f64>>, labels: Vec<Vec<u8>>) -> PyResult<(Option<f64>, Option<f64>, usize)> {
    let a = metrics::auc(&score_matrix(scores)?, &label_matrix(labels)?).map_err(err)?;
    Ok((a.macro_auc, a.micro_auc, a.skipped_labels))
}

#[pyfunction]
fn precision_at_n(scores: Vec<Vec<f64>>, labels: Vec<Vec<u8>>, n: usize) -> PyResult<f64> {
    metrics::precision_at_n(&score_matrix(scores)?, &label_matrix(labels)?, n).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (annotations, references, axis = "label"))]
fn set_agreement<'py>(
    py: Python<'py>,
    annotations: Vec<Vec<u8>>,
    references: Vec<Vec<u8>>,
    axis: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let a = metrics::set_agreement(&label_matrix(annotations)?, &label_matrix(references)?, self::axis(axis)?).map_err(err)?;
    serialized(py, &a)
}

#[pyfunction]
#[pyo3(signature = (scores, labels, mode = "ranking"))]
fn full_report<'py>(py: Python<'py>, scores: Vec<Vec<f64>>, labels: Vec<Vec<u8>>, mode: &str) -> PyResult<Bound<'py, PyAny>> {
    let mode = match mode {
        "ranking" => ReportMode::Ranking,
        "agreement" => ReportMode::Agreement,
        _ => return Err(PyValueError::new_err("mode must be \"ranking\" or \"agreement\"")),
    };
    let r = metrics::full_report(&score_matrix(scores)?, &label_matrix(labels)?, mode).map_err(err)?;
    serialized(py, &r)
}

#[pymodule]
fn rac(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocabulary>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(precision_at_n, m)?)?;
    m.add_function(wrap_pyfunction!(set_agreement, m)?)?;
    m.add_function(wrap_pyfunction!(full_report, m)?)?;
    Ok(())
}
