//! Python bindings: knowledge base, corpus, translational embeddings,
//! reasoning graphs and the reader model.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use medkgqa::corpus::{self, tokenize, EntityCatalog, SynthSpec};
use medkgqa::graph::{self as graph_mod, BuildOptions, ExportFormat};
use medkgqa::kb::{self as kb_mod, EntityId, PathwayPair, Triplet};
use medkgqa::kg_embed::{self, TransConfig, TransModel};
use medkgqa::model::{Ablation, Model};
use medkgqa::trainer::{self, Knowledge, TrainConfig};

fn err(e: medkgqa::Error) -> PyErr {
    match e {
        medkgqa::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Serializes through JSON into plain Python objects.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Reads a dict (or None) into a serde type whose fields all have defaults.
fn from_py<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(obj) = obj.filter(|o| !o.is_none()) else {
        return Ok(T::default());
    };
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn merge_kwargs<T: Serialize + DeserializeOwned>(base: T, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(kwargs) = kwargs else { return Ok(base) };
    let py = kwargs.py();
    let mut value = serde_json::to_value(&base).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let extra: String = py.import("json")?.call_method1("dumps", (kwargs,))?.extract()?;
    let extra: serde_json::Value = serde_json::from_str(&extra).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let (serde_json::Value::Object(dst), serde_json::Value::Object(src)) = (&mut value, extra) else {
        return Err(PyValueError::new_err("expected keyword arguments"));
    };
    for (k, v) in src {
        if !dst.contains_key(&k) {
            return Err(PyValueError::new_err(format!("unknown setting {k:?}")));
        }
        dst.insert(k, v);
    }
    serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn parse_entity(kind: &str, accession: &str) -> PyResult<EntityId> {
    match kind {
        "drug" => Ok(EntityId::drug(accession)),
        "protein" => Ok(EntityId::protein(accession)),
        other => Err(PyValueError::new_err(format!("entity kind must be drug or protein, got {other:?}"))),
    }
}

#[pyclass(name = "KnowledgeBase", module = "medkgqa_py", skip_from_py_object)]
#[derive(Clone, Default)]
pub struct PyKnowledgeBase {
    inner: kb_mod::KnowledgeBase,
}

#[pymethods]
impl PyKnowledgeBase {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    /// Loads `triplets.tsv` and, when present, `pathways.tsv` from a directory.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: kb_mod::KnowledgeBase::load_dir(dir).map_err(err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save_dir(dir).map_err(err)?;
        Ok(())
    }

    /// Returns False when the triplet was already present.
    fn add_triplet(&mut self, protein: &str, action: &str, drug: &str) -> bool {
        self.inner.add_triplet(Triplet::new(protein, action, drug))
    }

    fn add_pathway(&mut self, source: &str, target: &str) -> PyResult<bool> {
        Ok(self.inner.add_pathway(PathwayPair::new(source, target).map_err(err)?))
    }

    #[getter]
    fn num_triplets(&self) -> usize {
        self.inner.triplets().len()
    }

    #[getter]
    fn num_pathways(&self) -> usize {
        self.inner.pathways().len()
    }

    fn drugs(&self) -> Vec<String> {
        self.inner.drugs().into_iter().map(|e| e.accession).collect()
    }

    fn proteins(&self) -> Vec<String> {
        self.inner.proteins().into_iter().map(|e| e.accession).collect()
    }

    fn actions(&self) -> Vec<String> {
        self.inner.actions().into_iter().map(|a| a.0).collect()
    }

    fn targets_of(&self, drug: &str) -> PyResult<Vec<String>> {
        let t = self.inner.targets_of(&EntityId::drug(drug)).map_err(err)?;
        Ok(t.into_iter().map(|e| e.accession).collect())
    }

    #[pyo3(signature = (protein, directed=false))]
    fn interactors_of(&self, protein: &str, directed: bool) -> PyResult<Vec<String>> {
        let t = self.inner.interactors_of(&EntityId::protein(protein), directed).map_err(err)?;
        Ok(t.into_iter().map(|e| e.accession).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "KnowledgeBase(triplets={}, pathways={})",
            self.inner.triplets().len(),
            self.inner.pathways().len()
        )
    }
}

#[pyclass(name = "Sample", module = "medkgqa_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PySample {
    inner: corpus::Sample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn subject(&self) -> String {
        self.inner.subject.accession.clone()
    }

    #[getter]
    fn query(&self) -> String {
        self.inner.query()
    }

    #[getter]
    fn candidates(&self) -> Vec<String> {
        self.inner.candidates.iter().map(|c| c.accession.clone()).collect()
    }

    #[getter]
    fn supports(&self) -> Vec<String> {
        self.inner.supports.clone()
    }

    #[getter]
    fn answer(&self) -> Option<String> {
        self.inner.answer.as_ref().map(|a| a.accession.clone())
    }

    fn __repr__(&self) -> String {
        format!("Sample(id={:?}, query={:?}, candidates={})", self.inner.id, self.inner.query(), self.inner.candidates.len())
    }
}

fn unwrap_samples(samples: Vec<PyRef<'_, PySample>>) -> Vec<corpus::Sample> {
    samples.iter().map(|s| s.inner.clone()).collect()
}

fn wrap_samples(samples: Vec<corpus::Sample>) -> Vec<PySample> {
    samples.into_iter().map(|inner| PySample { inner }).collect()
}

#[pyfunction]
fn load_samples(path: PathBuf) -> PyResult<Vec<PySample>> {
    Ok(wrap_samples(corpus::load_samples(path).map_err(err)?))
}

#[pyfunction]
fn save_samples(samples: Vec<PyRef<'_, PySample>>, path: PathBuf) -> PyResult<()> {
    corpus::save_samples(&unwrap_samples(samples), path).map_err(err)
}

#[pyfunction]
fn parse_samples(json: &str) -> PyResult<Vec<PySample>> {
    Ok(wrap_samples(corpus::parse_samples(json).map_err(err)?))
}

#[pyfunction]
fn samples_to_json(samples: Vec<PyRef<'_, PySample>>) -> PyResult<String> {
    corpus::samples_to_json(&unwrap_samples(samples)).map_err(err)
}

#[pyclass(name = "SynthCorpus", module = "medkgqa_py")]
pub struct PySynthCorpus {
    inner: corpus::SynthCorpus,
}

#[pymethods]
impl PySynthCorpus {
    /// Generates a corpus; keyword arguments override the default spec
    /// (n_drugs, n_proteins, n_samples, candidates, distractor_rate, ...).
    #[staticmethod]
    #[pyo3(signature = (**spec))]
    fn generate(spec: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let spec: SynthSpec = merge_kwargs(SynthSpec::default(), spec)?;
        let inner = corpus::synth_generate(&spec, &mut ChaCha8Rng::seed_from_u64(spec.seed)).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn kb(&self) -> PyKnowledgeBase {
        PyKnowledgeBase {
            inner: self.inner.kb.clone(),
        }
    }

    #[getter]
    fn samples(&self) -> Vec<PySample> {
        wrap_samples(self.inner.samples.clone())
    }

    fn ground_truth<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.ground_truth)
    }

    /// Writes the corpus files and returns their paths.
    fn write(&self, dir: PathBuf) -> PyResult<Vec<PathBuf>> {
        self.inner.write(dir).map_err(err)
    }
}

#[pyclass(name = "EmbeddingTable", module = "medkgqa_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyEmbeddingTable {
    inner: kg_embed::EmbeddingTable,
}

#[pymethods]
impl PyEmbeddingTable {
    /// Trains on every triplet of `kb`. Keyword arguments override the
    /// default settings (model, dim, epochs, lr, margin, batch_size,
    /// negatives, optimizer). Returns the table and the per-epoch losses.
    #[staticmethod]
    #[pyo3(signature = (kb, seed=7, **config))]
    fn train(kb: &PyKnowledgeBase, seed: u64, config: Option<&Bound<'_, PyDict>>) -> PyResult<(Self, Vec<f64>)> {
        let config: TransConfig = merge_kwargs(TransConfig::default(), config)?;
        let triplets: Vec<Triplet> = kb.inner.triplets().iter().cloned().collect();
        let out = kg_embed::train_embeddings(&kb.inner, &triplets, &config, &mut ChaCha8Rng::seed_from_u64(seed))
            .map_err(err)?;
        Ok((Self { inner: out.table }, out.epoch_losses))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: kg_embed::EmbeddingTable::import(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.export(path).map_err(err)
    }

    #[getter]
    fn model(&self) -> &'static str {
        self.inner.model.as_str()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    fn vector(&self, kind: &str, accession: &str) -> PyResult<Option<Vec<f64>>> {
        Ok(self.inner.entities.get(&parse_entity(kind, accession)?).cloned())
    }

    /// Translation distance of a fact; lower is more plausible.
    fn score(&self, protein: &str, action: &str, drug: &str) -> PyResult<f64> {
        self.inner.score(&Triplet::new(protein, action, drug)).map_err(err)
    }

    /// Link prediction over the knowledge base triplets: mrr, mr and
    /// hits at 1, 3 and 10.
    #[pyo3(signature = (kb, filtered=true))]
    fn link_prediction<'py>(&self, py: Python<'py>, kb: &PyKnowledgeBase, filtered: bool) -> PyResult<Bound<'py, PyAny>> {
        let report = kg_embed::eval_link_prediction(&self.inner, &kb.inner, filtered).map_err(err)?;
        to_py(py, &report)
    }

    fn __repr__(&self) -> String {
        format!(
            "EmbeddingTable(model={}, dim={}, entities={})",
            self.inner.model.as_str(),
            self.inner.dim,
            self.inner.entities.len()
        )
    }
}

fn render_graph(
    graph: &graph_mod::ReasoningGraph,
    scores: Option<&graph_mod::GraphScores>,
    format: &str,
) -> PyResult<String> {
    match format.parse::<ExportFormat>().map_err(err)? {
        ExportFormat::Dot => Ok(graph_mod::to_dot(graph, scores)),
        ExportFormat::Json => graph_mod::to_json(graph, scores).map_err(err),
    }
}

/// Builds the reasoning graph of one sample and renders it as "json" or
/// "dot". Entity mentions are resolved against the knowledge base and the
/// entities of `context` (defaults to the sample alone).
#[pyfunction]
#[pyo3(signature = (sample, kb, format="json", context=None))]
fn build_graph(
    sample: &PySample,
    kb: &PyKnowledgeBase,
    format: &str,
    context: Option<Vec<PyRef<'_, PySample>>>,
) -> PyResult<String> {
    let pool = context.map(unwrap_samples).unwrap_or_else(|| vec![sample.inner.clone()]);
    let catalog = EntityCatalog::build(&kb.inner, &pool);
    let docs: Vec<_> = sample.inner.supports.iter().map(|d| tokenize(d, &catalog)).collect();
    let graph = graph_mod::build_graph(&sample.inner, &docs, &kb.inner, &BuildOptions::default(), None).map_err(err)?;
    render_graph(&graph, None, format)
}

/// Default reader training settings as a dict; pass a modified copy as
/// `config` to the training functions.
#[pyfunction]
fn default_train_config<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &TrainConfig::default())
}

#[pyfunction]
fn ablation_flags() -> Vec<&'static str> {
    Ablation::FLAGS.to_vec()
}

fn knowledge<'a>(transe: Option<&'a PyEmbeddingTable>, transh: Option<&'a PyEmbeddingTable>) -> Knowledge<'a> {
    Knowledge {
        transe: transe.map(|t| &t.inner),
        transh: transh.map(|t| &t.inner),
    }
}

#[pyclass(name = "Reader", module = "medkgqa_py")]
pub struct PyReader {
    inner: Model,
}

#[pymethods]
impl PyReader {
    /// Trains a reader and keeps the best dev epoch. Returns the reader and
    /// the training curve.
    #[staticmethod]
    #[pyo3(signature = (train, dev, kb, config=None, transe=None, transh=None))]
    fn train<'py>(
        py: Python<'py>,
        train: Vec<PyRef<'py, PySample>>,
        dev: Vec<PyRef<'py, PySample>>,
        kb: &PyKnowledgeBase,
        config: Option<&Bound<'py, PyAny>>,
        transe: Option<PyRef<'py, PyEmbeddingTable>>,
        transh: Option<PyRef<'py, PyEmbeddingTable>>,
    ) -> PyResult<(Self, Bound<'py, PyAny>)> {
        let config: TrainConfig = from_py(config)?;
        let out = trainer::train(
            &unwrap_samples(train),
            &unwrap_samples(dev),
            &kb.inner,
            knowledge(transe.as_deref(), transh.as_deref()),
            &config,
        )
        .map_err(err)?;
        let curve = to_py(py, &out.curve)?;
        Ok((Self { inner: out.model }, curve))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Model::load(path, None).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    /// Accuracy, per-sample predictions and breakdowns.
    fn evaluate<'py>(&self, py: Python<'py>, samples: Vec<PyRef<'py, PySample>>, kb: &PyKnowledgeBase) -> PyResult<Bound<'py, PyAny>> {
        let report = trainer::evaluate(&self.inner, &unwrap_samples(samples), &kb.inner).map_err(err)?;
        to_py(py, &report)
    }

    /// Candidate accessions with their scores, in graph order.
    fn scores(&self, sample: &PySample, kb: &PyKnowledgeBase) -> PyResult<Vec<(String, f64)>> {
        let catalog = EntityCatalog::build(&kb.inner, std::slice::from_ref(&sample.inner));
        let p = self.inner.prepare(&sample.inner, &kb.inner, &catalog, false).map_err(err)?;
        let scores = self.inner.scores(&p).map_err(err)?;
        Ok(p.graph.candidates.iter().map(|c| c.accession.clone()).zip(scores).collect())
    }

    /// The sample's graph with attention weights and candidate scores.
    #[pyo3(signature = (sample, kb, format="json"))]
    fn graph(&self, sample: &PySample, kb: &PyKnowledgeBase, format: &str) -> PyResult<String> {
        let catalog = EntityCatalog::build(&kb.inner, std::slice::from_ref(&sample.inner));
        let p = self.inner.prepare(&sample.inner, &kb.inner, &catalog, false).map_err(err)?;
        let scores = self.inner.graph_scores(&p).map_err(err)?;
        render_graph(&p.graph, Some(&scores), format)
    }
}

#[pyfunction]
#[pyo3(signature = (train, dev, kb, hops, config=None, transe=None, transh=None))]
#[allow(clippy::too_many_arguments)]
fn hop_sweep<'py>(
    py: Python<'py>,
    train: Vec<PyRef<'py, PySample>>,
    dev: Vec<PyRef<'py, PySample>>,
    kb: &PyKnowledgeBase,
    hops: Vec<usize>,
    config: Option<&Bound<'py, PyAny>>,
    transe: Option<PyRef<'py, PyEmbeddingTable>>,
    transh: Option<PyRef<'py, PyEmbeddingTable>>,
) -> PyResult<Bound<'py, PyAny>> {
    let config: TrainConfig = from_py(config)?;
    let rows = trainer::hop_sweep(
        &unwrap_samples(train),
        &unwrap_samples(dev),
        &kb.inner,
        knowledge(transe.as_deref(), transh.as_deref()),
        &config,
        &hops,
    )
    .map_err(err)?;
    to_py(py, &rows)
}

/// `arms` are lists of ablation flags; the full model is always run first.
#[pyfunction]
#[pyo3(signature = (train, dev, kb, arms, config=None, transe=None, transh=None))]
#[allow(clippy::too_many_arguments)]
fn ablate<'py>(
    py: Python<'py>,
    train: Vec<PyRef<'py, PySample>>,
    dev: Vec<PyRef<'py, PySample>>,
    kb: &PyKnowledgeBase,
    arms: Vec<Vec<String>>,
    config: Option<&Bound<'py, PyAny>>,
    transe: Option<PyRef<'py, PyEmbeddingTable>>,
    transh: Option<PyRef<'py, PyEmbeddingTable>>,
) -> PyResult<Bound<'py, PyAny>> {
    let config: TrainConfig = from_py(config)?;
    let mut all = vec![Ablation::default()];
    for arm in &arms {
        all.push(Ablation::from_flags(arm).map_err(err)?);
    }
    let rows = trainer::ablate(
        &unwrap_samples(train),
        &unwrap_samples(dev),
        &kb.inner,
        knowledge(transe.as_deref(), transh.as_deref()),
        &config,
        &all,
    )
    .map_err(err)?;
    to_py(py, &rows)
}

/// k-fold cross validation; returns per-fold results, the mean accuracy
/// and the indices of the kept folds.
#[pyfunction]
#[pyo3(signature = (samples, kb, folds, config=None, transe=None, transh=None))]
fn cross_validate<'py>(
    py: Python<'py>,
    samples: Vec<PyRef<'py, PySample>>,
    kb: &PyKnowledgeBase,
    folds: usize,
    config: Option<&Bound<'py, PyAny>>,
    transe: Option<PyRef<'py, PyEmbeddingTable>>,
    transh: Option<PyRef<'py, PyEmbeddingTable>>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut config: TrainConfig = from_py(config)?;
    config.cv_folds = Some(folds);
    let out = trainer::cross_validate(&unwrap_samples(samples), &kb.inner, knowledge(transe.as_deref(), transh.as_deref()), &config)
        .map_err(err)?;
    let summary = serde_json::json!({
        "folds": out.folds,
        "mean_accuracy": out.mean_accuracy,
        "kept": out.kept,
    });
    to_py(py, &summary)
}

#[pyfunction]
fn trans_models() -> Vec<&'static str> {
    [TransModel::TransE, TransModel::TransH].iter().map(|m| m.as_str()).collect()
}

#[pymodule]
fn medkgqa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKnowledgeBase>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PySynthCorpus>()?;
    m.add_class::<PyEmbeddingTable>()?;
    m.add_class::<PyReader>()?;
    m.add_function(wrap_pyfunction!(load_samples, m)?)?;
    m.add_function(wrap_pyfunction!(save_samples, m)?)?;
    m.add_function(wrap_pyfunction!(parse_samples, m)?)?;
    m.add_function(wrap_pyfunction!(samples_to_json, m)?)?;
    m.add_function(wrap_pyfunction!(build_graph, m)?)?;
    m.add_function(wrap_pyfunction!(default_train_config, m)?)?;
    m.add_function(wrap_pyfunction!(ablation_flags, m)?)?;
    m.add_function(wrap_pyfunction!(trans_models, m)?)?;
    m.add_function(wrap_pyfunction!(hop_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
