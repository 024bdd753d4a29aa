//! Python bindings. Models run in f64; token sequences are lists of ids.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pcolab::config::ExperimentConfig;
use pcolab::corpus::Grammar;
use pcolab::evalkit::{self, Mutation};
use pcolab::losses::{self, CandidateSampler, LossConfig, PreferencePair};
use pcolab::numerics::{checkpoint, rng, Graph};
use pcolab::tinylm::{self as lm, DecodeStrategy, LmConfig, PromptResponse};
use pcolab::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::MissingArtifact(_) => PyFileNotFoundError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn from_json<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Experiment configuration, exchanged with Python as JSON.
#[pyclass(name = "Config")]
#[derive(Clone)]
struct PyConfig(ExperimentConfig);

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        match json {
            Some(text) => ExperimentConfig::from_json(text).map(PyConfig).map_err(py_err),
            None => Ok(PyConfig(ExperimentConfig::toy())),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ExperimentConfig::load(&path).map(PyConfig).map_err(py_err)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    fn hash(&self) -> String {
        self.0.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    /// JSON of the language-model section, suitable for `TinyLm`.
    fn lm_json(&self) -> String {
        serde_json::to_string(&self.0.lm).expect("serializes")
    }

    /// JSON of the loss section, suitable for `pair_loss`.
    fn loss_json(&self) -> String {
        serde_json::to_string(&self.0.loss).expect("serializes")
    }
}

/// Synthetic corpus: returns `(vocab, [(prompt, response), ...])`.
#[pyfunction]
fn generate_corpus(config: &PyConfig, start: u64, stop: u64) -> PyResult<(Vec<String>, Vec<(Vec<usize>, Vec<usize>)>)> {
    let g = Grammar::new(config.0.corpus.clone(), config.0.seed).map_err(py_err)?;
    let vocab = g.vocab().tokens().to_vec();
    let items = g.sentences(start..stop).into_iter().map(|s| (s.prompt_tokens, s.response_tokens)).collect();
    Ok((vocab, items))
}

#[pyclass(name = "TinyLm")]
struct PyTinyLm(lm::TinyLm<f64>);

#[pymethods]
impl PyTinyLm {
    #[new]
    fn new(lm_json: &str, seed: u64) -> PyResult<Self> {
        let cfg: LmConfig = from_json(lm_json)?;
        lm::TinyLm::new(cfg, seed).map(PyTinyLm).map_err(py_err)
    }

    /// Loads a checkpoint written by the command-line tool.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (header, params) = checkpoint::load::<f64>(&path).map_err(py_err)?;
        let cfg: LmConfig = header
            .meta
            .get("lm")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| PyValueError::new_err(e.to_string()))?
            .ok_or_else(|| PyValueError::new_err("checkpoint has no model config"))?;
        lm::TinyLm::from_params(cfg, params).map(PyTinyLm).map_err(py_err)
    }

    fn num_params(&self) -> usize {
        self.0.params.num_scalars()
    }

    /// Logits for every position of `seq`, one list per position.
    fn logits(&self, seq: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let t = self.0.logits(&seq).map_err(py_err)?;
        let v = *t.shape().last().expect("rank 2");
        Ok(t.data().chunks(v).map(<[f64]>::to_vec).collect())
    }

    #[pyo3(signature = (prompt, response, normalize = false))]
    fn logprob(&self, prompt: Vec<usize>, response: Vec<usize>, normalize: bool) -> PyResult<f64> {
        self.0
            .sequence_logprob(&PromptResponse::new(prompt, response), normalize)
            .map_err(py_err)
    }

    /// Decodes a continuation. `strategy` is `"greedy"`, `"temperature"` or
    /// `"ngram_block"`; `param` is the temperature or n-gram size.
    #[pyo3(signature = (prompt, max_new_tokens, strategy = "greedy", param = 0.0, seed = 0))]
    fn generate(&self, prompt: Vec<usize>, max_new_tokens: usize, strategy: &str, param: f64, seed: u64) -> PyResult<Vec<usize>> {
        let s = match strategy {
            "greedy" => DecodeStrategy::Greedy,
            "temperature" => DecodeStrategy::Temperature(param),
            "ngram_block" => DecodeStrategy::NgramBlock(param as usize),
            other => return Err(PyValueError::new_err(format!("unknown strategy {other:?}"))),
        };
        let mut r = rng::rng_for(seed, &[rng::stream::DECODE]);
        let out = lm::decode(&self.0, &prompt, s, max_new_tokens, &mut r).map_err(py_err)?;
        Ok(out.tokens)
    }

    #[pyo3(signature = (prompt, winner, loser, normalize = true))]
    fn margin(&self, prompt: Vec<usize>, winner: Vec<usize>, loser: Vec<usize>, normalize: bool) -> PyResult<f64> {
        losses::pairwise_margin(&self.0, &PreferencePair::new(prompt, winner, loser), normalize).map_err(py_err)
    }
}

/// `σ((b − M) / τ)`.
#[pyfunction]
fn gate(m: f64, b: f64, tau: f64) -> f64 {
    losses::gate(m, b, tau)
}

/// Value and gradient norm of the configured loss on `(prompt, winner, loser)`
/// triples. DPO uses the model itself as the reference.
#[pyfunction]
#[pyo3(signature = (model, pairs, loss_json, seed = 0))]
fn pair_loss(model: &PyTinyLm, pairs: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)>, loss_json: &str, seed: u64) -> PyResult<(f64, f64)> {
    let cfg: LossConfig = from_json(loss_json)?;
    cfg.validate().map_err(py_err)?;
    let pairs: Vec<PreferencePair> = pairs.into_iter().map(|(p, w, l)| PreferencePair::new(p, w, l)).collect();
    let reference = losses::reference_logprobs(&model.0, &pairs).map_err(py_err)?;
    let mut g = Graph::new();
    let bound = model.0.bind(&mut g, true);
    let mut sampler = CandidateSampler::new(seed);
    let loss = losses::pair_objective(&mut g, &bound, &pairs, &cfg, &mut sampler, Some(&reference)).map_err(py_err)?;
    let value = g.scalar_value(loss).map_err(py_err)?;
    g.backward(loss).map_err(py_err)?;
    let sq: f64 = bound
        .vars()
        .iter()
        .filter_map(|&v| g.grad(v))
        .flat_map(|gr| gr.iter().map(|x| x * x))
        .sum();
    Ok((value, sq.sqrt()))
}

#[pyfunction]
fn repeat_at_n(context: Vec<usize>, generation: Vec<usize>, n: usize) -> usize {
    evalkit::repeat_at_n(&context, &generation, n)
}

#[pyfunction]
fn unigram_f1(generation: Vec<usize>, reference: Vec<usize>) -> f64 {
    evalkit::unigram_f1(&generation, &reference)
}

/// Runs the verification suite. Returns `{"passed": bool, "checks": [...]}`.
#[pyfunction]
#[pyo3(signature = (seed = 0, mutation = "none"))]
fn oracle_suite<'py>(py: Python<'py>, seed: u64, mutation: &str) -> PyResult<Bound<'py, PyDict>> {
    let m: Mutation = serde_json::from_value(serde_json::Value::String(mutation.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown mutation {mutation:?}")))?;
    let report = py.allow_threads(|| evalkit::oracle_suite(seed, m));
    let out = PyDict::new(py);
    out.set_item("passed", report.all_passed())?;
    let checks = report
        .checks
        .iter()
        .map(|c| {
            let d = PyDict::new(py);
            d.set_item("name", &c.name)?;
            d.set_item("passed", c.passed)?;
            d.set_item("value", c.value)?;
            d.set_item("threshold", c.threshold)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    out.set_item("checks", checks)?;
    Ok(out)
}

#[pymodule]
pub fn pcolab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTinyLm>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(gate, m)?)?;
    m.add_function(wrap_pyfunction!(pair_loss, m)?)?;
    m.add_function(wrap_pyfunction!(repeat_at_n, m)?)?;
    m.add_function(wrap_pyfunction!(unigram_f1, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_suite, m)?)?;
    Ok(())
}
