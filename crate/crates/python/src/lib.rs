//! Python bindings: load or initialise a model bundle, chat with it, and
//! reach the evaluation helpers without going through the CLI.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use vlchat::eval::{accuracy, extract_choice, Choice};
use vlchat::infer::{chat, ChatMessage, ChatRequest};
use vlchat::text::Vocab;
use vlchat::train::TrainPlan;
use vlchat::{Error, ModelBundle, StackConfig};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Input(_) | Error::Role(_) | Error::Config(_) | Error::ContextLength { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// A loaded model bundle.
#[pyclass(frozen)]
struct Model {
    bundle: ModelBundle,
}

#[pymethods]
impl Model {
    /// Loads a checkpoint written by `vlchat train`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            bundle: ModelBundle::load(&path).map_err(to_py)?,
        })
    }

    /// Randomly initialised toy-sized model over the byte vocabulary.
    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn toy(seed: u64) -> PyResult<Self> {
        let cfg = StackConfig {
            vocab_size: Vocab::bytes_only().len(),
            ..StackConfig::toy()
        };
        Ok(Model {
            bundle: ModelBundle::init(cfg, Vocab::bytes_only(), seed).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.bundle.save(&path).map_err(to_py)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.bundle.config.vocab_size
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.bundle.num_params(None)
    }

    /// One user turn, optionally with a PNG image; returns the reply text.
    #[pyo3(signature = (text, png = None, max_new_tokens = 32))]
    fn ask(&self, py: Python<'_>, text: &str, png: Option<Vec<u8>>, max_new_tokens: usize) -> PyResult<String> {
        let mut msg = ChatMessage::user(text);
        if let Some(bytes) = png {
            msg = msg.with_png(&bytes);
        }
        let mut req = ChatRequest::new(vec![msg]);
        req.max_new_tokens = Some(max_new_tokens);
        py.detach(|| chat(&self.bundle, &req)).map(|r| r.text).map_err(to_py)
    }

    /// Full request/response in the HTTP JSON format.
    fn chat_json(&self, py: Python<'_>, request: &str) -> PyResult<String> {
        let req: ChatRequest = serde_json::from_str(request).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let reply = py.detach(|| chat(&self.bundle, &req)).map_err(to_py)?;
        serde_json::to_string(&reply).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Index of the option a free-text answer picks, or None.
#[pyfunction]
fn extract(response: &str, options: Vec<String>) -> Option<usize> {
    let refs: Vec<&str> = options.iter().map(String::as_str).collect();
    match extract_choice(response, &refs) {
        Choice::Index(i) => Some(i),
        Choice::Unparsed => None,
    }
}

/// Accuracy with a bootstrap 95% interval: `(estimate, lo, hi)`.
#[pyfunction]
#[pyo3(signature = (correct, seed = 0))]
fn bootstrap_accuracy(correct: Vec<bool>, seed: u64) -> PyResult<(f64, f64, f64)> {
    let acc = accuracy(&correct, seed).ok_or_else(|| PyValueError::new_err("no outcomes"))?;
    Ok((acc.estimate, acc.lo, acc.hi))
}

/// Learning rate of a named training preset at `step` of `total` updates.
#[pyfunction]
fn learning_rate(preset: &str, step: usize, total: usize) -> PyResult<f64> {
    let plan = TrainPlan::preset(preset).map_err(to_py)?;
    plan.lr_at(step, total).map_err(to_py)
}

#[pymodule]
pub fn vlchat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    Ok(())
}
