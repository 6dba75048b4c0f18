//! Self-drafting speculation from an n-gram cache.
//!
//! The cache maps a key token to at most `G` candidate `(N-1)`-grams that
//! followed it earlier in the stream. Each iteration queries the cache with
//! the last token of the context and verifies every candidate against the
//! target; a fully matched candidate is emitted as-is (`N-1` tokens),
//! otherwise the matched prefix is emitted followed by one target token.

use schemars::JsonSchema;
use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::iteration::{verify_greedy, DecodeIteration, SessionState};
use super::SpecError;
use crate::lm::{NGramModel, Sampler, SamplerConfig, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct LookaheadConfig {
    /// n-gram size; candidates are `n - 1` tokens long.
    pub n: usize,
    /// Guess-set size: candidates kept per key.
    pub g: usize,
}

impl Default for LookaheadConfig {
    fn default() -> Self {
        Self { n: 5, g: 5 }
    }
}

impl LookaheadConfig {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.n < 2 {
            return Err(SpecError::InvalidConfig(format!(
                "lookahead N must be >= 2, got {}",
                self.n
            )));
        }
        if self.g < 1 {
            return Err(SpecError::InvalidConfig(format!(
                "lookahead G must be >= 1, got {}",
                self.g
            )));
        }
        Ok(())
    }
}

/// Key token → recency-ordered candidate grams (most recent last).
#[derive(Debug, Clone, Default)]
pub struct LookaheadCache {
    capacity: usize,
    map: HashMap<TokenId, VecDeque<Vec<TokenId>>>,
}

impl LookaheadCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            map: HashMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Inserts `gram` under `key`. A gram already present is moved to the
    /// most-recent end; otherwise the least recent one is evicted when full.
    pub fn insert(&mut self, key: TokenId, gram: &[TokenId]) {
        let list = self.map.entry(key).or_default();
        if let Some(pos) = list.iter().position(|g| g.as_slice() == gram) {
            let existing = list.remove(pos).expect("position is in range");
            list.push_back(existing);
            return;
        }
        if list.len() == self.capacity {
            list.pop_front();
        }
        list.push_back(gram.to_vec());
    }

    pub fn candidates(&self, key: TokenId) -> impl Iterator<Item = &[TokenId]> {
        self.map.get(&key).into_iter().flatten().map(Vec::as_slice)
    }

    pub fn len_for(&self, key: TokenId) -> usize {
        self.map.get(&key).map_or(0, VecDeque::len)
    }

    pub fn contains(&self, key: TokenId, gram: &[TokenId]) -> bool {
        self.candidates(key).any(|g| g == gram)
    }

    pub fn keys(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.map.keys().copied()
    }
}

/// Feeds every stream position that has a complete `(n-1)`-gram after it
/// into the cache, resuming from `next_pos`.
fn refresh_cache(cache: &mut LookaheadCache, stream: &[TokenId], n: usize, next_pos: &mut usize) {
    let span = n - 1;
    while *next_pos + span < stream.len() {
        let p = *next_pos;
        cache.insert(stream[p], &stream[p + 1..=p + span]);
        *next_pos += 1;
    }
}

pub fn decode_lookahead(
    model: &NGramModel,
    prompt: &[TokenId],
    max_tokens: usize,
    cfg: LookaheadConfig,
    sampler_cfg: SamplerConfig,
) -> Result<Vec<DecodeIteration>, SpecError> {
    cfg.validate()?;
    let mut state = SessionState::new(model, prompt, max_tokens, Sampler::new(sampler_cfg));
    let mut cache = LookaheadCache::new(cfg.g);
    let mut next_pos = 0;
    refresh_cache(&mut cache, &state.context, cfg.n, &mut next_pos);

    while !state.done() {
        let mut best: Option<(usize, &[TokenId])> = None;
        if let Some(&key) = state.context.last() {
            for cand in cache.candidates(key) {
                let acc = verify_greedy(model, &state.context, cand);
                if best.is_none_or(|(b, _)| acc > b) {
                    best = Some((acc, cand));
                }
            }
        }
        let (tokens, speculated) = match best {
            Some((acc, cand)) if acc == cfg.n - 1 => (cand.to_vec(), acc),
            Some((acc, cand)) => {
                let mut ctx = state.context.clone();
                ctx.extend_from_slice(&cand[..acc]);
                let fresh = state.sampler.next_token(model, &ctx);
                let mut toks = cand[..acc].to_vec();
                toks.push(fresh);
                (toks, acc)
            }
            None => (vec![state.fresh_token()], 0),
        };
        state.emit(tokens, speculated);
        refresh_cache(&mut cache, &state.context, cfg.n, &mut next_pos);
    }
    Ok(state.finish())
}
