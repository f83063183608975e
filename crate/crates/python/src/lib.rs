//! Python bindings. Results cross the boundary as plain dicts and lists,
//! built from the JSON forms of the core types.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use kgmem_core::decay;
use kgmem_core::eval::{self, Category, Dataset, EvalOptions, Evaluator, Mode};
use kgmem_core::time::{from_millis, now};
use kgmem_core::{provider, Config, MemoryEngine, ProviderKind, Timestamp, TurnRequest};

create_exception!(kgmem, KgmemError, PyException, "Engine, store or provider failure.");

fn err(e: impl std::fmt::Display) -> PyErr {
    KgmemError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Seconds since the epoch, as from `time.time()`.
pub fn timestamp_from_seconds(seconds: Option<f64>) -> Result<Timestamp, String> {
    match seconds {
        None => Ok(now()),
        Some(s) if s.is_finite() => Ok(from_millis((s * 1000.0).round() as i64)),
        Some(s) => Err(format!("timestamp {s} is not finite")),
    }
}

/// Build a config from an optional TOML file plus overrides.
pub fn build_config(
    config_path: Option<PathBuf>,
    provider_kind: Option<&str>,
    k: Option<usize>,
    decay_rate: Option<f64>,
) -> Result<Config, String> {
    let mut config = match config_path {
        Some(path) => Config::from_file(path).map_err(|e| e.to_string())?,
        None => Config::default(),
    };
    if let Some(kind) = provider_kind {
        config.provider.kind = kind.parse::<ProviderKind>()?;
    }
    if let Some(k) = k {
        config.retrieval.k = k;
    }
    if let Some(rate) = decay_rate {
        config.retrieval.decay_rate = rate;
    }
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

/// Recency weights for items of the given ages (minutes), summing to 1.
pub fn weights_for_ages(ages_minutes: &[f64], decay_rate: f64) -> Result<Vec<f64>, String> {
    let normalized = decay::normalize_ages(ages_minutes).map_err(|e| e.to_string())?;
    let raw = decay::raw_weights(&normalized, decay_rate).map_err(|e| e.to_string())?;
    decay::normalize_weights(&raw).map_err(|e| e.to_string())
}

/// Memory engine bound to one store and index.
#[pyclass(name = "Engine", module = "kgmem")]
pub struct PyEngine {
    engine: Arc<MemoryEngine>,
}

#[pymethods]
impl PyEngine {
    /// `Engine(config_path=None, in_memory=False, provider=None, k=None, decay_rate=None)`
    #[new]
    #[pyo3(signature = (config_path=None, in_memory=false, provider=None, k=None, decay_rate=None))]
    fn new(
        py: Python<'_>,
        config_path: Option<PathBuf>,
        in_memory: bool,
        provider: Option<String>,
        k: Option<usize>,
        decay_rate: Option<f64>,
    ) -> PyResult<Self> {
        let config = build_config(config_path, provider.as_deref(), k, decay_rate).map_err(PyValueError::new_err)?;
        let engine = py
            .detach(move || {
                if in_memory {
                    let p = provider::from_config(&config.provider)?;
                    MemoryEngine::in_memory(config, p)
                } else {
                    MemoryEngine::open(config)
                }
            })
            .map_err(err)?;
        Ok(Self {
            engine: Arc::new(engine),
        })
    }

    /// Memory context for a turn about to be answered.
    #[pyo3(signature = (user_name, session_id, user_text, timestamp=None))]
    fn retrieve_context<'py>(
        &self,
        py: Python<'py>,
        user_name: String,
        session_id: String,
        user_text: String,
        timestamp: Option<f64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let at = timestamp_from_seconds(timestamp).map_err(PyValueError::new_err)?;
        let request = TurnRequest::new(user_name, session_id, user_text, at);
        let engine = self.engine.clone();
        let ctx = py.detach(move || engine.retrieve_context(&request)).map_err(err)?;
        to_py(py, &ctx)
    }

    /// Persist a completed turn; returns the receipt.
    #[pyo3(signature = (user_name, session_id, user_text, assistant_text, timestamp=None))]
    fn record_turn<'py>(
        &self,
        py: Python<'py>,
        user_name: String,
        session_id: String,
        user_text: String,
        assistant_text: String,
        timestamp: Option<f64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let at = timestamp_from_seconds(timestamp).map_err(PyValueError::new_err)?;
        let request = TurnRequest::new(user_name, session_id, user_text, at);
        let engine = self.engine.clone();
        let receipt = py
            .detach(move || engine.record_turn(&request, &assistant_text))
            .map_err(err)?;
        to_py(py, &receipt)
    }

    /// The session's summary record, or None.
    fn get_summary<'py>(&self, py: Python<'py>, session_id: String) -> PyResult<Bound<'py, PyAny>> {
        let summary = self.engine.get_summary(&session_id).map_err(err)?;
        to_py(py, &summary)
    }

    /// The user's persona graph (nodes and edges).
    fn get_persona<'py>(&self, py: Python<'py>, user_name: String) -> PyResult<Bound<'py, PyAny>> {
        let persona = self.engine.get_persona(&user_name).map_err(err)?;
        to_py(py, &persona)
    }

    fn has_user_history(&self, user_name: String) -> PyResult<bool> {
        self.engine.has_user_history(&user_name).map_err(err)
    }

    fn __repr__(&self) -> String {
        let c = self.engine.config();
        format!(
            "Engine(provider={}, k={}, decay_rate={})",
            c.provider.kind, c.retrieval.k, c.retrieval.decay_rate
        )
    }
}

/// Normalized recency weights for ages in minutes.
#[pyfunction]
#[pyo3(signature = (ages_minutes, decay_rate=0.02))]
fn decay_weights(ages_minutes: Vec<f64>, decay_rate: f64) -> PyResult<Vec<f64>> {
    weights_for_ages(&ages_minutes, decay_rate).map_err(PyValueError::new_err)
}

/// Whitespace token count used for all budgets.
#[pyfunction]
fn count_tokens(text: &str) -> usize {
    kgmem_core::tokens::count_tokens(text)
}

/// The built-in synthetic dataset as LongMemEval JSON text.
#[pyfunction]
#[pyo3(signature = (single_session_user=10, knowledge_update=10))]
fn synthetic_dataset(single_session_user: usize, knowledge_update: usize) -> String {
    eval::instances_to_json(&eval::synthetic_dataset(single_session_user, knowledge_update))
}

/// Replay a dataset file and return the report.
#[pyfunction]
#[pyo3(signature = (dataset_path, mode="memoria", config_path=None, provider=None, k=None, decay_rate=None,
                    categories=None, compare_ablation=false, timing=true))]
#[allow(clippy::too_many_arguments)]
fn replay<'py>(
    py: Python<'py>,
    dataset_path: PathBuf,
    mode: &str,
    config_path: Option<PathBuf>,
    provider: Option<String>,
    k: Option<usize>,
    decay_rate: Option<f64>,
    categories: Option<Vec<String>>,
    compare_ablation: bool,
    timing: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let config = build_config(config_path, provider.as_deref(), k, decay_rate).map_err(PyValueError::new_err)?;
    let mode: Mode = mode.parse().map_err(PyValueError::new_err)?;
    let categories = categories
        .unwrap_or_default()
        .iter()
        .map(|c| c.parse::<Category>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(PyValueError::new_err)?;
    let options = EvalOptions {
        mode,
        categories,
        compare_ablation,
        timing,
    };
    let report = py
        .detach(move || -> Result<_, String> {
            let dataset = Dataset::from_file(&dataset_path).map_err(|e| e.to_string())?;
            let p = provider::from_config(&config.provider).map_err(|e| e.to_string())?;
            Evaluator::new(config, p).run(&dataset, &options).map_err(|e| e.to_string())
        })
        .map_err(err)?;
    to_py(py, &report)
}

#[pymodule]
fn kgmem(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEngine>()?;
    m.add_function(wrap_pyfunction!(decay_weights, m)?)?;
    m.add_function(wrap_pyfunction!(count_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add("KgmemError", m.py().get_type::<KgmemError>())?;
    Ok(())
}
