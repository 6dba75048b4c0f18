//! Python bindings: model training and decoding, streamed sessions, and the
//! experiment runners. Reports cross the boundary as plain dicts.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use specleak::harness::{self, EngineSpec, ExperimentConfig, HarnessError};
use specleak::lm::{self, NGramModel, SamplerConfig, TokenId, UnknownPolicy};
use specleak::specdec::{Engine, EngineKind, LookaheadConfig};
use specleak::stream::{run_session, Framer, MitigationPolicy, SessionConfig};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn harness_err(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Io { .. } => PyIOError::new_err(e.to_string()),
        e => err(e),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Word-level n-gram language model.
#[pyclass(name = "NGramModel", module = "specleak", frozen)]
struct PyModel {
    inner: Arc<NGramModel>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (text, order = 5, alpha = 0.001))]
    fn train(text: &str, order: usize, alpha: f64) -> PyResult<Self> {
        let inner = NGramModel::train_on_text(text, order, alpha).map_err(err)?;
        Ok(Self {
            inner: Arc::new(inner),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = lm::load_model(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self {
            inner: Arc::new(inner),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        lm::save_model(&self.inner, &path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[pyo3(signature = (text, allow_unknown = false))]
    fn tokenize(&self, text: &str, allow_unknown: bool) -> PyResult<Vec<TokenId>> {
        let policy = if allow_unknown {
            UnknownPolicy::MapToUnk
        } else {
            UnknownPolicy::Reject
        };
        self.inner.vocab().tokenize(text, policy).map_err(err)
    }

    fn detokenize(&self, ids: Vec<TokenId>) -> String {
        self.inner.vocab().detokenize(&ids)
    }

    fn next_distribution(&self, context: Vec<TokenId>) -> Vec<f64> {
        self.inner.next_distribution(&context)
    }

    /// Decodes `prompt` autoregressively or with a lookahead engine and
    /// returns the tokens emitted per iteration. Engines needing a datastore
    /// or a draft model are available through `Workbench.session`.
    #[pyo3(signature = (prompt, engine = "lookahead", n = 5, g = 5, max_tokens = 64, temperature = 0.0, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        py: Python<'_>,
        prompt: &str,
        engine: &str,
        n: usize,
        g: usize,
        max_tokens: usize,
        temperature: f64,
        seed: u64,
    ) -> PyResult<Vec<Vec<TokenId>>> {
        let kind = match engine {
            "autoregressive" => EngineKind::Autoregressive,
            "lookahead" => EngineKind::Lookahead(LookaheadConfig { n, g }),
            other => return Err(err(format!("engine {other:?} needs a Workbench"))),
        };
        let engine = Engine::new(self.inner.clone(), kind).map_err(err)?;
        let ids = self.tokenize(prompt, false)?;
        let iters =
            py.detach(|| engine.decode(&ids, max_tokens, SamplerConfig { temperature, seed }));
        Ok(iters.into_iter().map(|it| it.tokens).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "NGramModel(order={}, alpha={}, vocab_size={})",
            self.inner.order(),
            self.inner.alpha(),
            self.inner.vocab_size()
        )
    }
}

/// Bundled model, data and configuration; runs the experiments.
#[pyclass(name = "Workbench", module = "specleak", frozen)]
struct PyWorkbench {
    inner: harness::Workbench,
}

#[pymethods]
impl PyWorkbench {
    /// `config` is TOML text; `overrides` are `key=value` strings applied on top.
    #[new]
    #[pyo3(signature = (config = "", overrides = Vec::new()))]
    fn new(config: &str, overrides: Vec<String>) -> PyResult<Self> {
        let cfg = ExperimentConfig::from_toml_with(config, &overrides).map_err(harness_err)?;
        let inner = harness::Workbench::new(cfg).map_err(harness_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn model(&self) -> PyModel {
        PyModel {
            inner: self.inner.model.clone(),
        }
    }

    fn config_toml(&self) -> String {
        self.inner.config.to_toml()
    }

    fn benchmark_prompts(&self) -> Vec<String> {
        self.inner
            .assets
            .prompts_general()
            .into_iter()
            .map(str::to_owned)
            .collect()
    }

    /// One streamed session; returns counts, packet sizes and the transcript.
    #[pyo3(signature = (prompt, engine = None, max_tokens = 64, temperature = 0.0, seed = 0, pad_to = None, aggregate = None))]
    #[allow(clippy::too_many_arguments)]
    fn session<'py>(
        &self,
        py: Python<'py>,
        prompt: &str,
        engine: Option<&str>,
        max_tokens: usize,
        temperature: f64,
        seed: u64,
        pad_to: Option<usize>,
        aggregate: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let spec = match engine {
            Some(name) => EngineSpec::parse_kind(name).map_err(harness_err)?,
            None => self.inner.config.engine.clone(),
        };
        let policy = match (pad_to, aggregate) {
            (Some(_), Some(_)) => return Err(err("pad_to and aggregate are exclusive")),
            (Some(size), None) => MitigationPolicy::constant(size),
            (None, Some(k)) => MitigationPolicy::aggregate(k),
            (None, None) => MitigationPolicy::none(),
        };
        let cfg = SessionConfig {
            engine: self.inner.engine(&spec).map_err(harness_err)?,
            prompt: self.inner.tokenize(prompt).map_err(harness_err)?,
            max_tokens,
            sampler: SamplerConfig { temperature, seed },
            policy,
            framer: Framer::default(),
        };
        let (log, _) = py.detach(|| run_session(&cfg)).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("token_counts", log.token_counts())?;
        out.set_item("packet_sizes", log.packet_sizes())?;
        out.set_item("transcript", log.transcript(self.inner.model.vocab()))?;
        out.set_item("overhead", log.overhead())?;
        Ok(out)
    }

    fn fingerprint<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = py
            .detach(|| harness::fingerprint(&self.inner))
            .map_err(harness_err)?;
        to_py(py, &report)
    }

    fn extraction<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = py
            .detach(|| harness::extraction(&self.inner))
            .map_err(harness_err)?;
        to_py(py, &report)
    }

    fn probe_n<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = py
            .detach(|| harness::probe_n(&self.inner))
            .map_err(harness_err)?;
        to_py(py, &report)
    }

    fn probe_g<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = py
            .detach(|| harness::probe_g(&self.inner))
            .map_err(harness_err)?;
        to_py(py, &report)
    }

    fn mitigation_sweep<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = py
            .detach(|| harness::mitigation_sweep(&self.inner))
            .map_err(harness_err)?;
        to_py(py, &report)
    }
}

/// Pearson correlation of two equal-length sequences.
#[pyfunction]
fn pearson(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    if xs.len() != ys.len() {
        return Err(err("sequences differ in length"));
    }
    Ok(specleak::observer::pearson(&xs, &ys))
}

#[pymodule]
#[pyo3(name = "specleak")]
fn specleak_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyWorkbench>()?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
