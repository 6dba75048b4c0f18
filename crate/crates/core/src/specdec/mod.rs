//! Decoding engines. Every engine reports its output as a sequence of
//! [`DecodeIteration`]s, one per decoder step; those step boundaries are what
//! the streaming channel later exposes.

mod draft_pair;
mod iteration;
mod lookahead;
mod retrieval;

use std::sync::Arc;

use thiserror::Error;

pub use draft_pair::{accepted_prefix, decode_draft_pair, propose_draft, DraftPairConfig};
pub use iteration::{output_tokens, token_counts, verify_greedy, DecodeIteration};
pub use lookahead::{decode_lookahead, LookaheadCache, LookaheadConfig};
pub use retrieval::{decode_retrieval, RetrievalDatastore, RetrievalParams, Retrieved};

use crate::lm::{NGramModel, Sampler, SamplerConfig, TokenId};
use iteration::SessionState;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
}

/// Plain one-token-per-step decoding.
pub fn decode_autoregressive(
    model: &NGramModel,
    prompt: &[TokenId],
    max_tokens: usize,
    cfg: SamplerConfig,
) -> Vec<DecodeIteration> {
    let mut state = SessionState::new(model, prompt, max_tokens, Sampler::new(cfg));
    while !state.done() {
        let tok = state.fresh_token();
        state.emit(vec![tok], 0);
    }
    state.finish()
}

#[derive(Debug, Clone)]
pub enum EngineKind {
    Autoregressive,
    Lookahead(LookaheadConfig),
    Retrieval(Arc<RetrievalDatastore>),
    DraftPair(DraftPairConfig),
}

/// A target model paired with a speculation strategy. Cheap to clone; all
/// heavy state is shared.
#[derive(Debug, Clone)]
pub struct Engine {
    pub target: Arc<NGramModel>,
    pub kind: EngineKind,
}

impl Engine {
    pub fn new(target: Arc<NGramModel>, kind: EngineKind) -> Result<Self, SpecError> {
        match &kind {
            EngineKind::Autoregressive => {}
            EngineKind::Lookahead(cfg) => cfg.validate()?,
            EngineKind::Retrieval(store) => store.params().validate()?,
            EngineKind::DraftPair(cfg) => {
                cfg.validate()?;
                if cfg.draft.vocab_size() != target.vocab_size() {
                    return Err(SpecError::InvalidConfig(
                        "draft and target models must share a vocabulary".into(),
                    ));
                }
            }
        }
        Ok(Self { target, kind })
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            EngineKind::Autoregressive => "autoregressive",
            EngineKind::Lookahead(_) => "lookahead",
            EngineKind::Retrieval(_) => "retrieval",
            EngineKind::DraftPair(_) => "draft-pair",
        }
    }

    /// Upper bound on tokens a single iteration may emit.
    pub fn max_tokens_per_iteration(&self) -> usize {
        match &self.kind {
            EngineKind::Autoregressive => 1,
            EngineKind::Lookahead(cfg) => cfg.n - 1,
            EngineKind::Retrieval(store) => store.params().draft_len + 1,
            EngineKind::DraftPair(cfg) => cfg.draft_len + 1,
        }
    }

    pub fn decode(
        &self,
        prompt: &[TokenId],
        max_tokens: usize,
        cfg: SamplerConfig,
    ) -> Vec<DecodeIteration> {
        let model = &self.target;
        let out = match &self.kind {
            EngineKind::Autoregressive => Ok(decode_autoregressive(model, prompt, max_tokens, cfg)),
            EngineKind::Lookahead(la) => decode_lookahead(model, prompt, max_tokens, *la, cfg),
            EngineKind::Retrieval(store) => decode_retrieval(model, prompt, max_tokens, store, cfg),
            EngineKind::DraftPair(dp) => decode_draft_pair(model, prompt, max_tokens, dp, cfg),
        };
        out.expect("engine configuration is validated on construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> NGramModel {
        NGramModel::train_on_text(
            "the cat sat on the mat\nthe dog sat on the log\nthe cat ate the fish on the mat",
            3,
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn autoregressive_is_one_token_per_step() {
        let m = toy();
        let prompt = m.vocab().tokenize("the cat", Default::default()).unwrap();
        let its = decode_autoregressive(&m, &prompt, 3, SamplerConfig::greedy());
        assert!(its.len() <= 3);
        assert!(its
            .iter()
            .all(|i| i.tokens.len() == 1 && i.speculated_accepted == 0));
        assert_eq!(
            its,
            decode_autoregressive(&m, &prompt, 3, SamplerConfig::greedy())
        );
    }

    #[test]
    fn autoregressive_matches_argmax_chain() {
        let m = toy();
        let prompt = m.vocab().tokenize("the dog", Default::default()).unwrap();
        let out = output_tokens(&decode_autoregressive(
            &m,
            &prompt,
            40,
            SamplerConfig::greedy(),
        ));
        let mut ctx = prompt.clone();
        let mut expected = Vec::new();
        for _ in 0..40 {
            let t = crate::lm::argmax(&m.next_distribution(&ctx)) as TokenId;
            if t == crate::lm::EOS {
                break;
            }
            expected.push(t);
            ctx.push(t);
        }
        assert_eq!(out, expected);
    }

    #[test]
    fn draft_mismatched_vocab_is_rejected() {
        let target = Arc::new(toy());
        let draft = Arc::new(NGramModel::train_on_text("x", 2, 0.1).unwrap());
        let kind = EngineKind::DraftPair(DraftPairConfig {
            draft,
            draft_len: 4,
            fallback_threshold: 0.2,
            rollback_threshold: 3.0,
        });
        assert!(Engine::new(target, kind).is_err());
    }
}
