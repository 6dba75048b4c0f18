//! Retrieval-based speculation over a datastore of token sequences.
//!
//! The store is indexed by a suffix array over all sequences joined with
//! unique separators. Each iteration looks up the longest suffix of the
//! generated context (capped at `max_match_len`), gathers the continuations
//! that follow its occurrences, and verifies the most frequent ones.

use schemars::JsonSchema;
use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::iteration::{verify_greedy, DecodeIteration, SessionState};
use super::SpecError;
use crate::lm::{NGramModel, Sampler, SamplerConfig, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct RetrievalParams {
    pub max_match_len: usize,
    pub top_k: usize,
    pub draft_len: usize,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            max_match_len: 8,
            top_k: 4,
            draft_len: 3,
        }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.max_match_len == 0 || self.top_k == 0 || self.draft_len == 0 {
            return Err(SpecError::InvalidConfig(
                "retrieval max_match_len, top_k and draft_len must all be >= 1".into(),
            ));
        }
        Ok(())
    }
}

const SEPARATOR_BASE: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct RetrievalDatastore {
    sequences: Vec<Vec<TokenId>>,
    params: RetrievalParams,
    /// Concatenated sequences; sequence `i` is followed by `SEPARATOR_BASE - i`.
    text: Vec<u32>,
    suffixes: Vec<u32>,
    /// Start offset of each sequence in `text`.
    starts: Vec<usize>,
}

impl RetrievalDatastore {
    pub fn new(sequences: Vec<Vec<TokenId>>, params: RetrievalParams) -> Result<Self, SpecError> {
        params.validate()?;
        let mut text = Vec::with_capacity(sequences.iter().map(|s| s.len() + 1).sum());
        let mut starts = Vec::with_capacity(sequences.len());
        for (i, seq) in sequences.iter().enumerate() {
            if seq
                .iter()
                .any(|&t| t >= SEPARATOR_BASE - sequences.len() as u32)
            {
                return Err(SpecError::InvalidConfig(
                    "token id collides with separator range".into(),
                ));
            }
            starts.push(text.len());
            text.extend_from_slice(seq);
            text.push(SEPARATOR_BASE - i as u32);
        }
        let mut suffixes: Vec<u32> = (0..text.len() as u32).collect();
        // Unique separators bound every comparison by one sequence length.
        suffixes.sort_unstable_by(|&a, &b| text[a as usize..].cmp(&text[b as usize..]));
        Ok(Self {
            sequences,
            params,
            text,
            suffixes,
            starts,
        })
    }

    pub fn empty(params: RetrievalParams) -> Self {
        Self::new(Vec::new(), params).expect("empty store is valid")
    }

    pub fn params(&self) -> RetrievalParams {
        self.params
    }

    pub fn with_params(&self, params: RetrievalParams) -> Result<Self, SpecError> {
        params.validate()?;
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    pub fn sequences(&self) -> &[Vec<TokenId>] {
        &self.sequences
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    fn compare_prefix(&self, suffix: u32, pattern: &[TokenId]) -> Ordering {
        let s = &self.text[suffix as usize..];
        let n = pattern.len().min(s.len());
        match s[..n].cmp(&pattern[..n]) {
            Ordering::Equal if s.len() < pattern.len() => Ordering::Less,
            Ordering::Equal => Ordering::Equal,
            other => other,
        }
    }

    /// Text offsets where `pattern` occurs, in store order.
    fn occurrences(&self, pattern: &[TokenId]) -> Vec<usize> {
        if pattern.is_empty() {
            return Vec::new();
        }
        let lo = self
            .suffixes
            .partition_point(|&s| self.compare_prefix(s, pattern) == Ordering::Less);
        let hi = self
            .suffixes
            .partition_point(|&s| self.compare_prefix(s, pattern) != Ordering::Greater);
        let mut hits: Vec<usize> = self.suffixes[lo..hi].iter().map(|&s| s as usize).collect();
        hits.sort_unstable();
        hits
    }

    /// Whether `pattern` occurs contiguously inside one stored sequence.
    pub fn contains(&self, pattern: &[TokenId]) -> bool {
        pattern.is_empty() || !self.occurrences(pattern).is_empty()
    }

    fn is_token(&self, offset: usize) -> bool {
        offset < self.text.len() && self.text[offset] < SEPARATOR_BASE - self.sequences.len() as u32
    }

    /// Longest suffix of `context` (up to `max_match_len`) that occurs with at
    /// least one following token, and the continuations after it ranked by
    /// frequency then first occurrence.
    pub fn retrieve(&self, context: &[TokenId]) -> Option<Retrieved> {
        let max_len = self.params.max_match_len.min(context.len());
        for len in (1..=max_len).rev() {
            let pattern = &context[context.len() - len..];
            let mut ranked: Vec<(Vec<TokenId>, usize, usize)> = Vec::new();
            let mut slot: HashMap<Vec<TokenId>, usize> = HashMap::new();
            for off in self.occurrences(pattern) {
                let start = off + len;
                let mut end = start;
                while end < start + self.params.draft_len && self.is_token(end) {
                    end += 1;
                }
                if end == start {
                    continue;
                }
                let cont = self.text[start..end].to_vec();
                match slot.get(&cont) {
                    Some(&i) => ranked[i].1 += 1,
                    None => {
                        slot.insert(cont.clone(), ranked.len());
                        ranked.push((cont, 1, ranked.len()));
                    }
                }
            }
            if ranked.is_empty() {
                continue;
            }
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
            ranked.truncate(self.params.top_k);
            return Some(Retrieved {
                match_len: len,
                drafts: ranked.into_iter().map(|(c, _, _)| c).collect(),
            });
        }
        None
    }

    /// Sequence index and in-sequence offset for a text offset.
    pub fn locate(&self, offset: usize) -> (usize, usize) {
        let seq = self.starts.partition_point(|&s| s <= offset) - 1;
        (seq, offset - self.starts[seq])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Retrieved {
    pub match_len: usize,
    pub drafts: Vec<Vec<TokenId>>,
}

pub fn decode_retrieval(
    model: &NGramModel,
    prompt: &[TokenId],
    max_tokens: usize,
    store: &RetrievalDatastore,
    sampler_cfg: SamplerConfig,
) -> Result<Vec<DecodeIteration>, SpecError> {
    let mut state = SessionState::new(model, prompt, max_tokens, Sampler::new(sampler_cfg));
    while !state.done() {
        let mut tokens = Vec::new();
        if let Some(found) = store.retrieve(&state.context) {
            let mut best = (0usize, 0usize);
            for (rank, draft) in found.drafts.iter().enumerate() {
                let acc = verify_greedy(model, &state.context, draft);
                if acc > best.0 {
                    best = (acc, rank);
                }
            }
            tokens.extend_from_slice(&found.drafts[best.1][..best.0]);
        }
        let speculated = tokens.len();
        let mut ctx = state.context.clone();
        ctx.extend_from_slice(&tokens);
        tokens.push(state.sampler.next_token(model, &ctx));
        state.emit(tokens, speculated);
    }
    Ok(state.finish())
}
