use schemars::JsonSchema;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::assets::{lines, Assets};
use super::HarnessError;
use crate::extraction::StrategyKind;
use crate::fingerprint::{ForestConfig, PromptSet, Scenario};
use crate::lm::{NGramModel, TokenId, UnknownPolicy};
use crate::specdec::{
    DraftPairConfig, Engine, EngineKind, LookaheadConfig, RetrievalDatastore, RetrievalParams,
};
use crate::stream::MitigationPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Training corpus; the bundled corpus when absent.
    pub corpus: Option<PathBuf>,
    pub order: usize,
    pub alpha: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            corpus: None,
            order: 5,
            alpha: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EngineSpec {
    Autoregressive,
    Lookahead {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_g")]
        g: usize,
    },
    Retrieval {
        #[serde(default = "default_max_match_len")]
        max_match_len: usize,
        #[serde(default = "default_top_k")]
        top_k: usize,
        #[serde(default = "default_retrieval_draft_len")]
        draft_len: usize,
        /// Datastore file, one sequence per line; bundled store when absent.
        #[serde(default)]
        store: Option<PathBuf>,
    },
    DraftPair {
        #[serde(default = "default_draft_order")]
        draft_order: usize,
        #[serde(default = "default_pair_draft_len")]
        draft_len: usize,
        #[serde(default = "default_fallback")]
        fallback_threshold: f64,
        #[serde(default = "default_rollback")]
        rollback_threshold: f64,
    },
}

fn default_n() -> usize {
    5
}
fn default_g() -> usize {
    5
}
fn default_max_match_len() -> usize {
    RetrievalParams::default().max_match_len
}
fn default_top_k() -> usize {
    RetrievalParams::default().top_k
}
fn default_retrieval_draft_len() -> usize {
    RetrievalParams::default().draft_len
}
fn default_draft_order() -> usize {
    2
}
fn default_pair_draft_len() -> usize {
    4
}
fn default_fallback() -> f64 {
    0.5
}
fn default_rollback() -> f64 {
    2.0
}

impl Default for EngineSpec {
    fn default() -> Self {
        EngineSpec::Lookahead {
            n: default_n(),
            g: default_g(),
        }
    }
}

impl EngineSpec {
    pub fn lookahead(n: usize, g: usize) -> Self {
        EngineSpec::Lookahead { n, g }
    }

    pub fn retrieval() -> Self {
        EngineSpec::Retrieval {
            max_match_len: default_max_match_len(),
            top_k: default_top_k(),
            draft_len: default_retrieval_draft_len(),
            store: None,
        }
    }

    pub fn draft_pair() -> Self {
        EngineSpec::DraftPair {
            draft_order: default_draft_order(),
            draft_len: default_pair_draft_len(),
            fallback_threshold: default_fallback(),
            rollback_threshold: default_rollback(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EngineSpec::Autoregressive => "autoregressive",
            EngineSpec::Lookahead { .. } => "lookahead",
            EngineSpec::Retrieval { .. } => "retrieval",
            EngineSpec::DraftPair { .. } => "draft-pair",
        }
    }

    pub fn parse_kind(name: &str) -> Result<Self, HarnessError> {
        match name {
            "autoregressive" => Ok(EngineSpec::Autoregressive),
            "lookahead" => Ok(EngineSpec::default()),
            "retrieval" => Ok(EngineSpec::retrieval()),
            "draft-pair" => Ok(EngineSpec::draft_pair()),
            other => Err(HarnessError::Config(format!(
                "unknown engine kind {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    pub temperature: f64,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self { temperature: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum PromptSource {
    General,
    Similar,
    /// One prompt per line.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct FingerprintSpec {
    pub scenario: Scenario,
    pub prompts: PromptSource,
    /// Victim-side rephrasings; the bundled sidecar when absent and the
    /// prompts are the general set.
    pub rephrased: Option<PathBuf>,
    pub traces_per_query: usize,
    pub test_traces: usize,
    pub max_tokens: usize,
    pub feature_len: usize,
    pub seeds: usize,
    pub shuffle_labels: bool,
    pub forest: ForestConfig,
    pub sweep_tpq: Vec<usize>,
    pub sweep_temperature: Vec<f64>,
}

impl Default for FingerprintSpec {
    fn default() -> Self {
        Self {
            scenario: Scenario::Exact,
            prompts: PromptSource::General,
            rephrased: None,
            traces_per_query: 5,
            test_traces: 5,
            max_tokens: 64,
            feature_len: crate::observer::DEFAULT_FEATURE_LEN,
            seeds: 1,
            shuffle_labels: false,
            forest: ForestConfig::default(),
            sweep_tpq: Vec::new(),
            sweep_temperature: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub constant: Vec<usize>,
    pub variable: Vec<usize>,
    pub aggregate: Vec<usize>,
    pub seeds: usize,
    pub temperature: f64,
    pub traces_per_query: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            constant: vec![crate::stream::DEFAULT_CONSTANT_PAD],
            variable: vec![0, 6, 12, 24, 48],
            aggregate: vec![1, 3, 5, 10, 20],
            seeds: 5,
            temperature: 0.8,
            traces_per_query: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionSpec {
    pub strategies: Vec<StrategyKind>,
    pub budget: usize,
    pub runs: usize,
    pub tokens_per_query: usize,
    pub max_tokens: usize,
    pub temperature: f64,
    /// Ranked wordlist (`word` or `word<TAB>count` per line); bundled list
    /// when absent.
    pub wordlist: Option<PathBuf>,
    pub top_words: usize,
}

impl Default for ExtractionSpec {
    fn default() -> Self {
        Self {
            strategies: vec![
                StrategyKind::Random,
                StrategyKind::CommonWords,
                StrategyKind::FeedbackReuse,
            ],
            budget: 2000,
            runs: 3,
            tokens_per_query: 1,
            max_tokens: 24,
            temperature: 0.8,
            wordlist: None,
            top_words: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    /// Lookahead settings swept by `probe-n` and `probe-g`.
    pub n_grid: Vec<usize>,
    pub g_grid: Vec<usize>,
    /// Cache capacity used while sweeping N, and N used while sweeping G.
    pub g_for_n: usize,
    pub n_for_g: usize,
    pub n_upper_bound: usize,
    pub g_upper_bound: usize,
    pub seeds: usize,
    pub temperature: f64,
    pub order: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            n_grid: (3..=8).collect(),
            g_grid: (1..=6).collect(),
            g_for_n: 5,
            n_for_g: 5,
            n_upper_bound: 10,
            g_upper_bound: 7,
            seeds: 5,
            temperature: 0.0,
            order: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

/// Everything an experiment depends on. Reports embed it verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads for session collection and training; 0 = all cores.
    pub workers: usize,
    pub data_dir: Option<PathBuf>,
    pub model: ModelSpec,
    pub engine: EngineSpec,
    pub sampler: SamplerSpec,
    pub mitigation: MitigationPolicy,
    pub fingerprint: FingerprintSpec,
    pub sweep: SweepSpec,
    pub extraction: ExtractionSpec,
    pub probes: ProbeSpec,
    pub output: OutputSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            data_dir: None,
            model: ModelSpec::default(),
            engine: EngineSpec::default(),
            sampler: SamplerSpec::default(),
            mitigation: MitigationPolicy::none(),
            fingerprint: FingerprintSpec::default(),
            sweep: SweepSpec::default(),
            extraction: ExtractionSpec::default(),
            probes: ProbeSpec::default(),
            output: OutputSpec::default(),
        }
    }
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), HarnessError> {
    if cond {
        Ok(())
    } else {
        Err(HarnessError::Config(msg.into()))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text` after applying `key.path=value` overrides; values are
    /// read as TOML when they parse, otherwise as strings.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut root: toml::Table =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every bound before any session runs.
    pub fn validate(&self) -> Result<(), HarnessError> {
        check(self.model.order >= 1, "model.order must be >= 1")?;
        check(
            self.model.alpha > 0.0 && self.model.alpha.is_finite(),
            "model.alpha must be positive",
        )?;
        match &self.engine {
            EngineSpec::Autoregressive => {}
            EngineSpec::Lookahead { n, g } => {
                LookaheadConfig { n: *n, g: *g }.validate()?;
            }
            EngineSpec::Retrieval {
                max_match_len,
                top_k,
                draft_len,
                ..
            } => RetrievalParams {
                max_match_len: *max_match_len,
                top_k: *top_k,
                draft_len: *draft_len,
            }
            .validate()?,
            EngineSpec::DraftPair {
                draft_order,
                draft_len,
                fallback_threshold,
                rollback_threshold,
            } => {
                check(*draft_order >= 1, "engine.draft_order must be >= 1")?;
                check(*draft_len >= 1, "engine.draft_len must be >= 1")?;
                check(
                    *fallback_threshold > 0.0 && *fallback_threshold <= 1.0,
                    "engine.fallback_threshold must be in (0, 1]",
                )?;
                check(
                    *rollback_threshold > 0.0,
                    "engine.rollback_threshold must be > 0",
                )?;
            }
        }
        check(
            self.sampler.temperature >= 0.0 && self.sampler.temperature.is_finite(),
            "sampler.temperature must be >= 0",
        )?;
        self.mitigation.validate()?;
        let f = &self.fingerprint;
        check(
            f.traces_per_query >= 1,
            "fingerprint.traces_per_query must be >= 1",
        )?;
        check(f.test_traces >= 1, "fingerprint.test_traces must be >= 1")?;
        check(f.max_tokens >= 1, "fingerprint.max_tokens must be >= 1")?;
        check(f.feature_len >= 1, "fingerprint.feature_len must be >= 1")?;
        check(f.seeds >= 1, "fingerprint.seeds must be >= 1")?;
        check(
            f.sweep_tpq.iter().all(|&t| t >= 1),
            "fingerprint.sweep_tpq entries must be >= 1",
        )?;
        check(
            f.sweep_temperature
                .iter()
                .all(|&t| t >= 0.0 && t.is_finite()),
            "fingerprint.sweep_temperature entries must be >= 0",
        )?;
        f.forest.validate()?;
        let s = &self.sweep;
        check(s.seeds >= 1, "sweep.seeds must be >= 1")?;
        check(
            s.traces_per_query >= 1,
            "sweep.traces_per_query must be >= 1",
        )?;
        check(
            s.constant.iter().all(|&c| c >= 1),
            "sweep.constant entries must be >= 1",
        )?;
        check(
            s.aggregate.iter().all(|&k| k >= 1),
            "sweep.aggregate entries must be >= 1",
        )?;
        check(s.temperature >= 0.0, "sweep.temperature must be >= 0")?;
        let e = &self.extraction;
        check(e.budget >= 1, "extraction.budget must be >= 1")?;
        check(e.runs >= 1, "extraction.runs must be >= 1")?;
        check(
            e.tokens_per_query >= 1,
            "extraction.tokens_per_query must be >= 1",
        )?;
        check(e.max_tokens >= 1, "extraction.max_tokens must be >= 1")?;
        check(e.top_words >= 1, "extraction.top_words must be >= 1")?;
        check(
            !e.strategies.is_empty(),
            "extraction.strategies must not be empty",
        )?;
        let p = &self.probes;
        check(
            p.n_grid.iter().all(|&n| n >= 2),
            "probes.n_grid entries must be >= 2",
        )?;
        check(
            p.g_grid.iter().all(|&g| g >= 1),
            "probes.g_grid entries must be >= 1",
        )?;
        check(p.n_for_g >= 3, "probes.n_for_g must be >= 3")?;
        check(p.g_for_n >= 1, "probes.g_for_n must be >= 1")?;
        check(p.seeds >= 1, "probes.seeds must be >= 1")?;
        check(p.order >= 2, "probes.order must be >= 2")?;
        Ok(())
    }

    pub fn assets(&self) -> Result<Assets, HarnessError> {
        Assets::resolve(self.data_dir.as_deref())
    }

    /// Runs `f` on a pool sized by `workers`.
    pub fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
        if self.workers == 0 {
            return Ok(f());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), HarnessError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {assignment:?} is not key=value")))?;
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                HarnessError::Config(format!("override {key}: {part} is not a table"))
            })?;
    }
    table.insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}

/// Loaded model, assets and helpers shared by every experiment.
#[derive(Debug, Clone)]
pub struct Workbench {
    pub config: ExperimentConfig,
    pub assets: Assets,
    pub model: Arc<NGramModel>,
}

impl Workbench {
    pub fn new(config: ExperimentConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let assets = config.assets()?;
        let corpus = match &config.model.corpus {
            Some(p) => std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?,
            None => assets.corpus().to_owned(),
        };
        let model = Arc::new(NGramModel::train_on_text(
            &corpus,
            config.model.order,
            config.model.alpha,
        )?);
        Ok(Self {
            config,
            assets,
            model,
        })
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, HarnessError> {
        Ok(self.model.vocab().tokenize(text, UnknownPolicy::Reject)?)
    }

    pub fn store(&self, path: Option<&Path>) -> Result<Vec<Vec<TokenId>>, HarnessError> {
        let owned;
        let rows = match path {
            Some(p) => {
                owned = std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?;
                lines(&owned)
            }
            None => self.assets.store(),
        };
        rows.into_iter().map(|l| self.tokenize(l)).collect()
    }

    pub fn engine(&self, spec: &EngineSpec) -> Result<Engine, HarnessError> {
        let kind = match spec {
            EngineSpec::Autoregressive => EngineKind::Autoregressive,
            EngineSpec::Lookahead { n, g } => {
                EngineKind::Lookahead(LookaheadConfig { n: *n, g: *g })
            }
            EngineSpec::Retrieval {
                max_match_len,
                top_k,
                draft_len,
                store,
            } => {
                let params = RetrievalParams {
                    max_match_len: *max_match_len,
                    top_k: *top_k,
                    draft_len: *draft_len,
                };
                EngineKind::Retrieval(Arc::new(RetrievalDatastore::new(
                    self.store(store.as_deref())?,
                    params,
                )?))
            }
            EngineSpec::DraftPair {
                draft_order,
                draft_len,
                fallback_threshold,
                rollback_threshold,
            } => {
                let docs: Vec<Vec<TokenId>> = lines(self.assets.corpus())
                    .into_iter()
                    .map(|l| self.tokenize(l))
                    .collect::<Result<_, _>>()?;
                let draft = NGramModel::train(
                    self.model.vocab().clone(),
                    &docs,
                    *draft_order,
                    self.config.model.alpha,
                )?;
                EngineKind::DraftPair(DraftPairConfig {
                    draft: Arc::new(draft),
                    draft_len: *draft_len,
                    fallback_threshold: *fallback_threshold,
                    rollback_threshold: *rollback_threshold,
                })
            }
        };
        Ok(Engine::new(self.model.clone(), kind)?)
    }

    pub fn prompt_lines(&self, source: &PromptSource) -> Result<Vec<String>, HarnessError> {
        Ok(match source {
            PromptSource::General => self
                .assets
                .prompts_general()
                .into_iter()
                .map(str::to_owned)
                .collect(),
            PromptSource::Similar => self
                .assets
                .prompts_similar()
                .into_iter()
                .map(str::to_owned)
                .collect(),
            PromptSource::File(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?;
                lines(&text).into_iter().map(str::to_owned).collect()
            }
        })
    }

    /// Prompt set for a fingerprint run, with rephrasings attached when the
    /// scenario needs them.
    pub fn prompt_set(&self, spec: &FingerprintSpec) -> Result<PromptSet, HarnessError> {
        let lines_ = self.prompt_lines(&spec.prompts)?;
        let prompts = lines_
            .iter()
            .map(|l| self.tokenize(l))
            .collect::<Result<Vec<_>, _>>()?;
        let mut set = PromptSet::new(prompts);
        set.names = lines_;
        if spec.scenario == Scenario::Approximate {
            let rephrased: Vec<String> = match (&spec.rephrased, &spec.prompts) {
                (Some(p), _) => {
                    let text = std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?;
                    lines(&text).into_iter().map(str::to_owned).collect()
                }
                (None, PromptSource::General) => self
                    .assets
                    .prompts_rephrased()
                    .into_iter()
                    .map(str::to_owned)
                    .collect(),
                (None, _) => {
                    return Err(HarnessError::Config(
                        "the approximate scenario needs fingerprint.rephrased for this prompt set"
                            .into(),
                    ))
                }
            };
            let toks = rephrased
                .iter()
                .map(|l| self.tokenize(l))
                .collect::<Result<Vec<_>, _>>()?;
            set = set.with_rephrased(toks);
        }
        Ok(set)
    }
}
