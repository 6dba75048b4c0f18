//! Multi-seed experiment drivers. Every report embeds the config it was
//! produced from and contains no wall-clock data, so rerunning a report's
//! config reproduces it exactly.

use schemars::JsonSchema;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{EngineSpec, ExperimentConfig, Workbench};
use super::HarnessError;
use crate::extraction::{run_extraction, ExtractionStrategy, LeakLedger, StrategyKind, Wordlist};
use crate::fingerprint::{run_experiment, ExperimentReport, ExperimentSpec, PromptSet};
use crate::lm::{NGramModel, SamplerConfig, UnknownPolicy};
use crate::observer::{Sample, Trace};
use crate::probes::{leak_g, leak_n, Parameter, PhraseSet, ProbeResult};
use crate::seed::derive_seed;
use crate::specdec::{Engine, EngineKind, LookaheadConfig};
use crate::stream::{LocalClient, MitigationPolicy};

// Seed-derivation tags, one per experiment family.
const TAG_FINGERPRINT: u64 = 1;
const TAG_GRID: u64 = 2;
const TAG_SWEEP: u64 = 3;
const TAG_EXTRACT: u64 = 4;
const TAG_PROBE_N: u64 = 5;
const TAG_PROBE_G: u64 = 6;

/// Response length of the N probe.
pub const PROBE_N_TOKENS: usize = 60;
/// Token the G-probe phrases share, and the token the N probe repeats.
pub const PROBE_KEY: &str = "run";
pub const PROBE_REPEAT: &str = "A";

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn seeds(base: u64, tag: u64, n: usize) -> Vec<u64> {
    (0..n as u64)
        .map(|i| derive_seed(base, &[tag, i]))
        .collect()
}

fn base_spec(cfg: &ExperimentConfig) -> ExperimentSpec {
    let f = &cfg.fingerprint;
    ExperimentSpec {
        scenario: f.scenario,
        traces_per_query: f.traces_per_query,
        test_traces: f.test_traces,
        temperature: cfg.sampler.temperature,
        max_tokens: f.max_tokens,
        feature_len: f.feature_len,
        policy: cfg.mitigation,
        forest: f.forest,
        shuffle_labels: f.shuffle_labels,
        seed: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct GridCell {
    pub traces_per_query: usize,
    pub temperature: f64,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FingerprintReport {
    pub engine: String,
    pub runs: Vec<ExperimentReport>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_macro_f1: f64,
    /// TPQ x temperature cells, present when a sweep was requested.
    pub grid: Vec<GridCell>,
    pub config: ExperimentConfig,
}

fn run_seeds(
    engine: &Engine,
    prompts: &PromptSet,
    spec: &ExperimentSpec,
    seeds: &[u64],
) -> Result<Vec<ExperimentReport>, HarnessError> {
    seeds
        .iter()
        .map(|&seed| {
            Ok(run_experiment(
                engine,
                prompts,
                &ExperimentSpec {
                    seed,
                    ..spec.clone()
                },
            )?)
        })
        .collect()
}

pub fn fingerprint(wb: &Workbench) -> Result<FingerprintReport, HarnessError> {
    let cfg = &wb.config;
    let engine = wb.engine(&cfg.engine)?;
    let prompts = wb.prompt_set(&cfg.fingerprint)?;
    let spec = base_spec(cfg);
    cfg.in_pool(|| {
        let runs = run_seeds(
            &engine,
            &prompts,
            &spec,
            &seeds(cfg.seed, TAG_FINGERPRINT, cfg.fingerprint.seeds),
        )?;
        let accs: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        let f1s: Vec<f64> = runs.iter().map(|r| r.macro_f1).collect();
        let f = &cfg.fingerprint;
        let tpqs = if f.sweep_tpq.is_empty() && !f.sweep_temperature.is_empty() {
            vec![f.traces_per_query]
        } else {
            f.sweep_tpq.clone()
        };
        let temps = if f.sweep_temperature.is_empty() && !f.sweep_tpq.is_empty() {
            vec![cfg.sampler.temperature]
        } else {
            f.sweep_temperature.clone()
        };
        let grid_seeds = seeds(cfg.seed, TAG_GRID, f.seeds);
        let mut grid = Vec::new();
        for &tpq in &tpqs {
            for &temperature in &temps {
                let cell_spec = ExperimentSpec {
                    traces_per_query: tpq,
                    temperature,
                    ..spec.clone()
                };
                let reports = run_seeds(&engine, &prompts, &cell_spec, &grid_seeds)?;
                let a: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
                grid.push(GridCell {
                    traces_per_query: tpq,
                    temperature,
                    mean_accuracy: mean(&a),
                    std_accuracy: std_dev(&a),
                    mean_macro_f1: mean(&reports.iter().map(|r| r.macro_f1).collect::<Vec<_>>()),
                    accuracies: a,
                });
            }
        }
        Ok(FingerprintReport {
            engine: engine.name().to_owned(),
            mean_accuracy: mean(&accs),
            std_accuracy: std_dev(&accs),
            mean_macro_f1: mean(&f1s),
            runs,
            grid,
            config: cfg.clone(),
        })
    })?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SweepRow {
    /// `none`, `constant`, `variable` or `aggregate`.
    pub family: String,
    /// Pad size, D or k; 0 for the baseline.
    pub parameter: usize,
    pub policy: MitigationPolicy,
    pub label: String,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// Observable bytes over payload bytes.
    pub mean_overhead: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SweepReport {
    pub engine: String,
    pub chance: f64,
    pub rows: Vec<SweepRow>,
    pub config: ExperimentConfig,
}

impl SweepReport {
    pub fn family(&self, name: &str) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.family == name).collect()
    }
}

/// Reruns the fingerprint attack under each mitigation point. All points
/// share the same seeds, so differences come from the policy alone.
pub fn mitigation_sweep(wb: &Workbench) -> Result<SweepReport, HarnessError> {
    let cfg = &wb.config;
    let s = &cfg.sweep;
    let engine = wb.engine(&cfg.engine)?;
    let prompts = wb.prompt_set(&cfg.fingerprint)?;
    let spec = ExperimentSpec {
        traces_per_query: s.traces_per_query,
        temperature: s.temperature,
        shuffle_labels: false,
        ..base_spec(cfg)
    };
    let mut points: Vec<(&str, usize, MitigationPolicy)> =
        vec![("none", 0, MitigationPolicy::none())];
    points.extend(
        s.constant
            .iter()
            .map(|&c| ("constant", c, MitigationPolicy::constant(c))),
    );
    points.extend(
        s.variable
            .iter()
            .map(|&d| ("variable", d, MitigationPolicy::variable(d, 0))),
    );
    points.extend(
        s.aggregate
            .iter()
            .map(|&k| ("aggregate", k, MitigationPolicy::aggregate(k))),
    );
    let run_seeds_ = seeds(cfg.seed, TAG_SWEEP, s.seeds);
    let rows = cfg.in_pool(|| {
        points
            .iter()
            .map(|&(family, parameter, policy)| {
                let reports = run_seeds(
                    &engine,
                    &prompts,
                    &ExperimentSpec {
                        policy,
                        ..spec.clone()
                    },
                    &run_seeds_,
                )?;
                let a: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
                Ok(SweepRow {
                    family: family.to_owned(),
                    parameter,
                    policy,
                    label: policy.label(),
                    mean_accuracy: mean(&a),
                    std_accuracy: std_dev(&a),
                    mean_overhead: mean(&reports.iter().map(|r| r.overhead).collect::<Vec<_>>()),
                    accuracies: a,
                })
            })
            .collect::<Result<Vec<_>, HarnessError>>()
    })??;
    Ok(SweepReport {
        engine: engine.name().to_owned(),
        chance: 1.0 / prompts.len() as f64,
        rows,
        config: cfg.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ExtractionRun {
    pub seed: u64,
    pub unique_leaks: usize,
    pub soundness: f64,
    pub ledger: LeakLedger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct StrategyReport {
    pub strategy: StrategyKind,
    pub runs: Vec<ExtractionRun>,
    pub mean_unique_leaks: f64,
    /// `(queries, mean cumulative unique leaks)` across runs.
    pub mean_timeline: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ExtractionReport {
    pub store_sequences: usize,
    /// How a unique leak is counted.
    pub convention: String,
    pub strategies: Vec<StrategyReport>,
    pub config: ExperimentConfig,
}

impl ExtractionReport {
    pub fn mean_unique(&self, kind: StrategyKind) -> Option<f64> {
        self.strategies
            .iter()
            .find(|s| s.strategy == kind)
            .map(|s| s.mean_unique_leaks)
    }

    /// CSV with one column per strategy, one row per query count.
    pub fn timeline_csv(&self) -> String {
        let mut out = String::from("queries");
        for s in &self.strategies {
            out.push(',');
            out.push_str(s.strategy.as_str());
        }
        out.push('\n');
        let rows = self
            .strategies
            .iter()
            .map(|s| s.mean_timeline.len())
            .max()
            .unwrap_or(0);
        for i in 0..rows {
            let q = self
                .strategies
                .iter()
                .find_map(|s| s.mean_timeline.get(i))
                .map_or(0, |p| p.0);
            out.push_str(&q.to_string());
            for s in &self.strategies {
                out.push(',');
                if let Some((_, v)) = s.mean_timeline.get(i) {
                    out.push_str(&format!("{v:.4}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// The retrieval engine the extraction attack targets: the configured one,
/// or a default retrieval engine when another kind is configured.
pub fn extraction_engine(wb: &Workbench) -> Result<Engine, HarnessError> {
    match &wb.config.engine {
        spec @ EngineSpec::Retrieval { .. } => wb.engine(spec),
        _ => wb.engine(&EngineSpec::retrieval()),
    }
}

pub fn extraction(wb: &Workbench) -> Result<ExtractionReport, HarnessError> {
    let cfg = &wb.config;
    let e = &cfg.extraction;
    let engine = extraction_engine(wb)?;
    let EngineKind::Retrieval(store) = &engine.kind else {
        unreachable!("extraction_engine builds a retrieval engine")
    };
    let vocab = wb.model.vocab();
    let wordlist_text = match &e.wordlist {
        Some(p) => std::fs::read_to_string(p).map_err(|err| HarnessError::io(p, err))?,
        None => wb.assets.wordlist().to_owned(),
    };
    let wordlist = Arc::new(Wordlist::parse(&wordlist_text, vocab, e.top_words)?);
    let run_seeds_ = seeds(cfg.seed, TAG_EXTRACT, e.runs);
    let jobs: Vec<(StrategyKind, u64)> = e
        .strategies
        .iter()
        .flat_map(|&k| run_seeds_.iter().map(move |&s| (k, s)))
        .collect();
    let results = cfg.in_pool(|| {
        jobs.par_iter()
            .map(|&(kind, seed)| {
                let strategy = ExtractionStrategy {
                    kind,
                    query_budget: e.budget,
                    tokens_per_query: e.tokens_per_query,
                    vocab_size: vocab.len(),
                    wordlist: wordlist.clone(),
                };
                let mut client = LocalClient::new(
                    engine.clone(),
                    e.max_tokens,
                    SamplerConfig {
                        temperature: e.temperature,
                        seed: derive_seed(seed, &[1]),
                    },
                )
                .with_policy(cfg.mitigation);
                let ledger = run_extraction(&mut client, &strategy, seed)?;
                Ok(ExtractionRun {
                    seed,
                    unique_leaks: ledger.len(),
                    soundness: ledger.soundness(store),
                    ledger,
                })
            })
            .collect::<Result<Vec<_>, HarnessError>>()
    })??;
    let mut by_kind: BTreeMap<usize, StrategyReport> = BTreeMap::new();
    for ((kind, _), run) in jobs.iter().zip(results) {
        let pos = e.strategies.iter().position(|k| k == kind).expect("listed");
        by_kind
            .entry(pos)
            .or_insert_with(|| StrategyReport {
                strategy: *kind,
                runs: Vec::new(),
                mean_unique_leaks: 0.0,
                mean_timeline: Vec::new(),
            })
            .runs
            .push(run);
    }
    let strategies = by_kind
        .into_values()
        .map(|mut s| {
            s.mean_unique_leaks = mean(
                &s.runs
                    .iter()
                    .map(|r| r.unique_leaks as f64)
                    .collect::<Vec<_>>(),
            );
            let len = s
                .runs
                .iter()
                .map(|r| r.ledger.timeline.len())
                .min()
                .unwrap_or(0);
            s.mean_timeline = (0..len)
                .map(|i| {
                    let q = s.runs[0].ledger.timeline[i].0;
                    let v: Vec<f64> = s
                        .runs
                        .iter()
                        .map(|r| r.ledger.timeline[i].1 as f64)
                        .collect();
                    (q, mean(&v))
                })
                .collect();
            s
        })
        .collect();
    Ok(ExtractionReport {
        store_sequences: store.sequences().len(),
        convention: "a unique leak is a distinct (preceding token, accepted block) pair".into(),
        strategies,
        config: cfg.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ProbeRow {
    pub configured: usize,
    pub seed: u64,
    pub exact: bool,
    pub result: ProbeResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ProbeReport {
    pub parameter: Parameter,
    /// Detection rule, stated so the evidence can be re-checked.
    pub rule: String,
    pub rows: Vec<ProbeRow>,
    pub exact: usize,
    pub total: usize,
    pub config: ExperimentConfig,
}

impl ProbeReport {
    pub fn all_exact(&self) -> bool {
        self.exact == self.total
    }

    /// Count traces in the observer CSV layout: one trace per session,
    /// one sample per iteration with the token count as its size.
    pub fn evidence_traces(&self) -> Vec<(String, Trace)> {
        let mut out = Vec::new();
        for (r, row) in self.rows.iter().enumerate() {
            for ev in &row.result.evidence {
                let id = match ev.family_size {
                    Some(p) => format!("r{r}-cfg{}-p{p}", row.configured),
                    None => format!("r{r}-cfg{}", row.configured),
                };
                let trace = Trace {
                    samples: ev
                        .counts
                        .iter()
                        .map(|&c| Sample {
                            inter_arrival: 1.0,
                            size: c as u32,
                        })
                        .collect(),
                    label: Some(row.configured.to_string()),
                    complete: true,
                };
                out.push((id, trace));
            }
        }
        out
    }
}

/// The model the probes run against, trained on the probe corpus.
pub fn probe_model(wb: &Workbench) -> Result<Arc<NGramModel>, HarnessError> {
    Ok(Arc::new(NGramModel::train_on_text(
        wb.assets.probe_corpus(),
        wb.config.probes.order,
        wb.config.model.alpha,
    )?))
}

fn probe_client(
    model: &Arc<NGramModel>,
    n: usize,
    g: usize,
    max_tokens: usize,
    temperature: f64,
    seed: u64,
) -> Result<LocalClient, HarnessError> {
    let engine = Engine::new(
        model.clone(),
        EngineKind::Lookahead(LookaheadConfig { n, g }),
    )?;
    Ok(LocalClient::new(
        engine,
        max_tokens,
        SamplerConfig { temperature, seed },
    ))
}

pub fn probe_n(wb: &Workbench) -> Result<ProbeReport, HarnessError> {
    let cfg = &wb.config;
    let p = &cfg.probes;
    let model = probe_model(wb)?;
    let a = model
        .vocab()
        .tokenize(PROBE_REPEAT, UnknownPolicy::Reject)?[0];
    let jobs: Vec<(usize, usize, u64)> = p
        .n_grid
        .iter()
        .flat_map(|&n| {
            seeds(cfg.seed, TAG_PROBE_N, p.seeds)
                .into_iter()
                .enumerate()
                .map(move |(i, s)| (n, i, s))
        })
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(n, i, seed)| {
            let mut client =
                probe_client(&model, n, p.g_for_n, PROBE_N_TOKENS, p.temperature, seed)?;
            // vary the prompt length across seeds
            let prompt = vec![a; 8 + 3 * i];
            let result = leak_n(&mut client, &prompt, p.n_upper_bound)?;
            Ok(ProbeRow {
                configured: n,
                seed,
                exact: result.recovered == Some(n),
                result,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(probe_report(
        Parameter::N,
        "N = 1 + largest per-iteration token count after the first multi-token iteration",
        rows,
        cfg,
    ))
}

/// Phrase families of length `len` from the bundled probe phrases.
pub fn phrase_set(
    wb: &Workbench,
    model: &NGramModel,
    len: usize,
) -> Result<PhraseSet, HarnessError> {
    let vocab = model.vocab();
    let key = vocab.id(PROBE_KEY).ok_or_else(|| {
        HarnessError::Data(format!("probe model lacks the key token {PROBE_KEY:?}"))
    })?;
    let mut families: BTreeMap<usize, Vec<_>> = BTreeMap::new();
    for ph in wb.assets.probe_phrases()? {
        if ph.len == len {
            families
                .entry(ph.family)
                .or_default()
                .push(vocab.tokenize(&ph.text, UnknownPolicy::Reject)?);
        }
    }
    if families.is_empty() {
        return Err(HarnessError::Data(format!(
            "no probe phrases of length {len}"
        )));
    }
    Ok(PhraseSet { key, families })
}

pub fn probe_g(wb: &Workbench) -> Result<ProbeReport, HarnessError> {
    let cfg = &wb.config;
    let p = &cfg.probes;
    let model = probe_model(wb)?;
    // Phrases as long as N make a single mis-speculation realign the
    // iterations onto the key every cycle.
    let phrases = phrase_set(wb, &model, p.n_for_g)?;
    let jobs: Vec<(usize, u64)> = p
        .g_grid
        .iter()
        .flat_map(|&g| {
            seeds(cfg.seed, TAG_PROBE_G, p.seeds)
                .into_iter()
                .map(move |s| (g, s))
        })
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(g, seed)| {
            let mut client =
                probe_client(&model, p.n_for_g, g, PROBE_N_TOKENS, p.temperature, seed)?;
            let result = leak_g(&mut client, p.g_upper_bound, &phrases)?;
            Ok(ProbeRow {
                configured: g,
                seed,
                exact: result.recovered == Some(g),
                result,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(probe_report(
        Parameter::G,
        "after two cycles, the token following the key is mis-speculated when it is the last token of an \
         iteration shorter than the longest one; G = largest P before the majority of them are",
        rows,
        cfg,
    ))
}

fn probe_report(
    parameter: Parameter,
    rule: impl Into<String>,
    rows: Vec<ProbeRow>,
    cfg: &ExperimentConfig,
) -> ProbeReport {
    ProbeReport {
        parameter,
        rule: rule.into(),
        exact: rows.iter().filter(|r| r.exact).count(),
        total: rows.len(),
        rows,
        config: cfg.clone(),
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(report: &T) -> Result<String, HarnessError> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, report: &T) -> Result<(), HarnessError> {
    write_text(path, &to_json(report)?)
}
