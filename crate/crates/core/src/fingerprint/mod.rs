//! Query fingerprinting: profile each known prompt offline, then classify
//! fresh traces of unknown queries by their packet-size pattern.

mod forest;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use forest::{
    train_forest, DecisionTree, ForestConfig, ForestModel, LabeledDataset, MaxFeatures,
    SplitCriterion,
};

use crate::lm::{SamplerConfig, TokenId};
use crate::observer::{featurize, Trace, DEFAULT_FEATURE_LEN};
use crate::seed::derive_seed;
use crate::specdec::Engine;
use crate::stream::{run_session, Framer, MitigationPolicy, SessionConfig, StreamError};

#[derive(Debug, Error)]
pub enum FingerprintError {
    #[error("invalid forest configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("feature vector has length {got}, model expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("{0}")]
    MissingPrompts(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema,
)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Attacker profiled exactly the prompts the victim sends.
    Exact,
    /// Same as exact, on a prompt set sharing one template.
    SimilarStructure,
    /// Attacker profiled the originals; the victim sends rephrasings.
    Approximate,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Exact => "exact",
            Scenario::SimilarStructure => "similar-structure",
            Scenario::Approximate => "approximate",
        }
    }
}

/// Prompts indexed by label; `rephrased[i]` is the victim-side variant of
/// `prompts[i]` for the approximate scenario.
#[derive(Debug, Clone, Default)]
pub struct PromptSet {
    pub names: Vec<String>,
    pub prompts: Vec<Vec<TokenId>>,
    pub rephrased: Option<Vec<Vec<TokenId>>>,
}

impl PromptSet {
    pub fn new(prompts: Vec<Vec<TokenId>>) -> Self {
        Self {
            names: (0..prompts.len()).map(|i| format!("q{i:02}")).collect(),
            prompts,
            rephrased: None,
        }
    }

    pub fn with_rephrased(mut self, rephrased: Vec<Vec<TokenId>>) -> Self {
        self.rephrased = Some(rephrased);
        self
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub traces_per_query: usize,
    pub test_traces: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub feature_len: usize,
    pub policy: MitigationPolicy,
    pub forest: ForestConfig,
    /// Control run: training labels are permuted before fitting.
    pub shuffle_labels: bool,
    pub seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            scenario: Scenario::Exact,
            traces_per_query: 5,
            test_traces: 5,
            temperature: 0.0,
            max_tokens: 64,
            feature_len: DEFAULT_FEATURE_LEN,
            policy: MitigationPolicy::none(),
            forest: ForestConfig::default(),
            shuffle_labels: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ExperimentReport {
    pub scenario: Scenario,
    pub engine: String,
    pub labels: usize,
    pub train_traces: usize,
    pub test_traces: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Mean bandwidth overhead of the test sessions.
    pub overhead: f64,
    pub spec: ExperimentSpec,
}

/// Collects one trace per (prompt, repetition). Seeds depend only on the
/// phase, prompt index and repetition, so collection order is irrelevant.
pub fn collect_traces(
    engine: &Engine,
    prompts: &[Vec<TokenId>],
    per_prompt: usize,
    phase: u64,
    spec: &ExperimentSpec,
) -> Result<Vec<(usize, Trace, f64)>, StreamError> {
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|i| (0..per_prompt).map(move |t| (i, t)))
        .collect();
    jobs.into_par_iter()
        .map(|(i, t)| {
            let seed = derive_seed(spec.seed, &[phase, i as u64, t as u64]);
            let cfg = SessionConfig {
                engine: engine.clone(),
                prompt: prompts[i].clone(),
                max_tokens: spec.max_tokens,
                sampler: SamplerConfig {
                    temperature: spec.temperature,
                    seed,
                },
                policy: spec.policy.reseeded(derive_seed(seed, &[1])),
                framer: Framer::default(),
            };
            let (log, _) = run_session(&cfg)?;
            Ok((i, Trace::from_packets(&log.packets), log.overhead()))
        })
        .collect()
}

pub fn run_experiment(
    engine: &Engine,
    prompts: &PromptSet,
    spec: &ExperimentSpec,
) -> Result<ExperimentReport, FingerprintError> {
    if prompts.len() < 2 {
        return Err(FingerprintError::InvalidDataset(
            "at least two prompts are required".into(),
        ));
    }
    if spec.traces_per_query == 0 || spec.test_traces == 0 || spec.feature_len == 0 {
        return Err(FingerprintError::InvalidConfig(
            "traces_per_query, test_traces and feature_len must be >= 1".into(),
        ));
    }
    spec.forest.validate()?;
    spec.policy.validate()?;
    let test_prompts = match spec.scenario {
        Scenario::Approximate => match &prompts.rephrased {
            Some(r) if r.len() == prompts.len() => r,
            Some(r) => {
                return Err(FingerprintError::MissingPrompts(format!(
                    "{} rephrased prompts for {} originals",
                    r.len(),
                    prompts.len()
                )))
            }
            None => {
                return Err(FingerprintError::MissingPrompts(
                    "the approximate scenario needs a rephrased prompt set".into(),
                ))
            }
        },
        _ => &prompts.prompts,
    };

    let train = collect_traces(engine, &prompts.prompts, spec.traces_per_query, 0, spec)?;
    let test = collect_traces(engine, test_prompts, spec.test_traces, 1, spec)?;

    let mut labels: Vec<usize> = train.iter().map(|(i, _, _)| *i).collect();
    if spec.shuffle_labels {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[2]));
        labels.shuffle(&mut rng);
    }
    let ds = LabeledDataset::new(
        train
            .iter()
            .map(|(_, t, _)| featurize(t, spec.feature_len).values)
            .collect(),
        labels,
        prompts.names.clone(),
        spec.traces_per_query,
    )?;
    let model = train_forest(
        &ds,
        &ForestConfig {
            seed: derive_seed(spec.seed, &[3]),
            ..spec.forest
        },
    )?;

    let n = prompts.len();
    let mut confusion = vec![vec![0usize; n]; n];
    for (truth, trace, _) in &test {
        let (pred, _) = model.predict(&featurize(trace, spec.feature_len).values)?;
        confusion[*truth][pred] += 1;
    }
    let overhead = test.iter().map(|(_, _, o)| o).sum::<f64>() / test.len() as f64;
    Ok(ExperimentReport {
        scenario: spec.scenario,
        engine: engine.name().to_owned(),
        labels: n,
        train_traces: train.len(),
        test_traces: test.len(),
        accuracy: accuracy(&confusion),
        macro_f1: macro_f1(&confusion),
        confusion,
        overhead,
        spec: spec.clone(),
    })
}

pub fn accuracy(confusion: &[Vec<usize>]) -> f64 {
    let total: usize = confusion.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let hits: usize = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    hits as f64 / total as f64
}

/// Unweighted mean of per-class F1 over classes that occur in the truth or
/// the predictions; a class with no true positives scores 0.
pub fn macro_f1(confusion: &[Vec<usize>]) -> f64 {
    let n = confusion.len();
    let mut sum = 0.0;
    let mut classes = 0;
    for c in 0..n {
        let tp = confusion[c][c] as f64;
        let actual: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        if actual == 0 && predicted == 0 {
            continue;
        }
        classes += 1;
        let denom = (actual + predicted) as f64;
        sum += 2.0 * tp / denom;
    }
    if classes == 0 {
        0.0
    } else {
        sum / classes as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_on_hand_confusion() {
        // class 0: tp 2, fn 1, fp 0 -> f1 = 4/5
        // class 1: tp 1, fn 0, fp 1 -> f1 = 2/3
        let c = vec![vec![2, 1], vec![0, 1]];
        assert!((accuracy(&c) - 0.75).abs() < 1e-12);
        assert!((macro_f1(&c) - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_confusion_scores_one() {
        let c = vec![vec![5, 0, 0], vec![0, 5, 0], vec![0, 0, 5]];
        assert_eq!(accuracy(&c), 1.0);
        assert_eq!(macro_f1(&c), 1.0);
    }
}
