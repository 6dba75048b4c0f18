//! Recovering a lookahead engine's N and G from per-iteration token counts.

use schemars::JsonSchema;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::TokenId;
use crate::stream::{QueryClient, StreamError};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid phrase set: {0}")]
    InvalidPhraseSet(String),
    #[error("invalid probe: {0}")]
    InvalidProbe(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Parameter {
    N,
    G,
}

/// What one probe session showed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ProbeEvidence {
    /// Phrases cycled in this session (G probe only).
    pub family_size: Option<usize>,
    pub counts: Vec<usize>,
    /// Steady-state occurrences of the token after the key token.
    pub observed: usize,
    pub mis_speculated: usize,
    /// Output offsets of steady-state single-token iterations.
    pub single_token_positions: Vec<usize>,
}

impl ProbeEvidence {
    pub fn fails(&self) -> bool {
        self.observed > 0 && 2 * self.mis_speculated > self.observed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ProbeResult {
    pub parameter: Parameter,
    /// `None` when the evidence does not support a value.
    pub recovered: Option<usize>,
    /// Fraction of steady-state observations agreeing with the verdict.
    pub confidence: f64,
    pub evidence: Vec<ProbeEvidence>,
    pub note: Option<String>,
}

impl ProbeResult {
    fn inconclusive(
        parameter: Parameter,
        evidence: Vec<ProbeEvidence>,
        note: impl Into<String>,
    ) -> Self {
        Self {
            parameter,
            recovered: None,
            confidence: 0.0,
            evidence,
            note: Some(note.into()),
        }
    }
}

/// Sends a maximally repetitive prompt and reads N off the largest
/// iteration. Iterations before the first multi-token one are warm-up.
pub fn leak_n(
    client: &mut dyn QueryClient,
    prompt: &[TokenId],
    n_upper_bound: usize,
) -> Result<ProbeResult, ProbeError> {
    let counts = client.query_counts(prompt)?;
    let evidence = |observed, hits| ProbeEvidence {
        family_size: None,
        counts: counts.clone(),
        observed,
        mis_speculated: hits,
        single_token_positions: Vec::new(),
    };
    let Some(first) = counts.iter().position(|&c| c > 1) else {
        return Ok(ProbeResult::inconclusive(
            Parameter::N,
            vec![evidence(0, 0)],
            "no iteration emitted more than one token",
        ));
    };
    let steady = &counts[first..];
    let max = *steady.iter().max().expect("non-empty");
    let at_max = steady.iter().filter(|&&c| c == max).count();
    let ev = evidence(steady.len(), 0);
    if max + 1 > n_upper_bound {
        return Ok(ProbeResult::inconclusive(
            Parameter::N,
            vec![ev],
            format!("largest iteration ({max} tokens) exceeds the bound {n_upper_bound}"),
        ));
    }
    Ok(ProbeResult {
        parameter: Parameter::N,
        recovered: Some(max + 1),
        confidence: at_max as f64 / steady.len() as f64,
        evidence: vec![ev],
        note: None,
    })
}

/// Families of phrases sharing a key token, indexed by family size P.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhraseSet {
    pub key: TokenId,
    pub families: BTreeMap<usize, Vec<Vec<TokenId>>>,
}

impl PhraseSet {
    /// Checks the shape the G probe relies on: families `1..=max_p` exist,
    /// family P has P phrases, every phrase contains the key once followed
    /// by a token, and successors of the key differ within a family.
    pub fn validate(&self, max_p: usize) -> Result<(), ProbeError> {
        for p in 1..=max_p {
            let fam = self
                .families
                .get(&p)
                .ok_or_else(|| ProbeError::InvalidPhraseSet(format!("no family of size {p}")))?;
            if fam.len() != p {
                return Err(ProbeError::InvalidPhraseSet(format!(
                    "family {p} has {} phrases",
                    fam.len()
                )));
            }
            let mut succ = Vec::new();
            for ph in fam {
                let pos = self.key_position(ph).ok_or_else(|| {
                    ProbeError::InvalidPhraseSet(format!(
                        "a phrase in family {p} lacks the key or its successor"
                    ))
                })?;
                succ.push(ph[pos + 1]);
            }
            succ.sort_unstable();
            succ.dedup();
            if succ.len() != p {
                return Err(ProbeError::InvalidPhraseSet(format!(
                    "family {p} repeats a successor of the key"
                )));
            }
        }
        Ok(())
    }

    fn key_position(&self, phrase: &[TokenId]) -> Option<usize> {
        let pos = phrase.iter().position(|&t| t == self.key)?;
        (pos + 1 < phrase.len() && !phrase[pos + 1..].contains(&self.key)).then_some(pos)
    }

    pub fn phrase_len(&self) -> Option<usize> {
        self.families.values().flatten().next().map(Vec::len)
    }
}

/// Marks each steady-state occurrence of the token after the key as
/// mis-speculated when it arrives as the last token of a short iteration,
/// i.e. as the target's own token rather than a verified guess.
pub fn classify_session(
    iterations: &[Vec<TokenId>],
    successors: &[TokenId],
    steady_from: usize,
) -> ProbeEvidence {
    let max = iterations.iter().map(Vec::len).max().unwrap_or(0);
    let mut offset = 0;
    let (mut observed, mut missed) = (0, 0);
    let mut singles = Vec::new();
    for it in iterations {
        for (i, t) in it.iter().enumerate() {
            let pos = offset + i;
            if pos >= steady_from && successors.contains(t) {
                observed += 1;
                if i + 1 == it.len() && it.len() < max {
                    missed += 1;
                }
            }
        }
        if it.len() == 1 && offset >= steady_from {
            singles.push(offset);
        }
        offset += it.len();
    }
    ProbeEvidence {
        family_size: None,
        counts: iterations.iter().map(Vec::len).collect(),
        observed,
        mis_speculated: missed,
        single_token_positions: singles,
    }
}

pub const SESSION_ATTEMPTS: usize = 3;

/// Cycles P = 1, 2, ... phrases through the cache. While P <= G every
/// phrase's n-gram survives until its next use; once P > G it is evicted
/// and the token after the key is mis-speculated every cycle.
pub fn leak_g(
    client: &mut dyn QueryClient,
    g_upper_bound: usize,
    phrases: &PhraseSet,
) -> Result<ProbeResult, ProbeError> {
    if g_upper_bound == 0 {
        return Err(ProbeError::InvalidProbe(
            "g_upper_bound must be >= 1".into(),
        ));
    }
    phrases.validate(g_upper_bound + 1)?;
    let len = phrases.phrase_len().expect("validated");
    let mut evidence = Vec::new();
    for p in 1..=g_upper_bound + 1 {
        let fam = &phrases.families[&p];
        let prompt: Vec<TokenId> = fam.iter().flatten().copied().collect();
        let successors: Vec<TokenId> = fam
            .iter()
            .map(|ph| ph[phrases.key_position(ph).expect("validated") + 1])
            .collect();
        let cycle = p * len;
        let max_tokens = len * (5 * p + len);
        // A sampled detour can leave the cycle; such a session carries no
        // evidence and is repeated with a fresh query.
        let mut ev = None;
        for _ in 0..SESSION_ATTEMPTS {
            let log = client.query_with_budget(&prompt, max_tokens)?;
            let iterations: Vec<Vec<TokenId>> =
                log.iterations.iter().map(|it| it.tokens.clone()).collect();
            let e = classify_session(&iterations, &successors, 2 * cycle);
            if e.observed > 0 {
                ev = Some(e);
                break;
            }
        }
        let Some(mut ev) = ev else {
            return Ok(ProbeResult::inconclusive(
                Parameter::G,
                evidence,
                format!("the {p}-phrase cycle never reached a steady state"),
            ));
        };
        ev.family_size = Some(p);
        let failed = ev.fails();
        evidence.push(ev);
        if failed {
            if p == 1 {
                return Ok(ProbeResult::inconclusive(
                    Parameter::G,
                    evidence,
                    "a single phrase is already mis-speculated; the target does not behave like an LRU cache",
                ));
            }
            let (agree, total) = evidence.iter().fold((0, 0), |(a, t), e| {
                let ok = if e.fails() {
                    e.mis_speculated
                } else {
                    e.observed - e.mis_speculated
                };
                (a + ok, t + e.observed)
            });
            return Ok(ProbeResult {
                parameter: Parameter::G,
                recovered: Some(p - 1),
                confidence: if total == 0 {
                    0.0
                } else {
                    agree as f64 / total as f64
                },
                evidence,
                note: None,
            });
        }
    }
    Ok(ProbeResult::inconclusive(
        Parameter::G,
        evidence,
        format!("no mis-speculation up to {} phrases", g_upper_bound + 1),
    ))
}
