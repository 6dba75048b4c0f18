//! Small-draft / large-target speculation with fallback and rollback.

use std::sync::Arc;

use super::iteration::{DecodeIteration, SessionState};
use super::SpecError;
use crate::lm::{NGramModel, Sampler, SamplerConfig, TokenId};

#[derive(Debug, Clone)]
pub struct DraftPairConfig {
    pub draft: Arc<NGramModel>,
    /// Most tokens the draft proposes per burst.
    pub draft_len: usize,
    /// Drafting stops once the draft's top probability drops below this.
    pub fallback_threshold: f64,
    /// Draft tokens whose cross-entropy under the target exceeds this are
    /// rolled back together with everything after them.
    pub rollback_threshold: f64,
}

impl DraftPairConfig {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.draft_len == 0 {
            return Err(SpecError::InvalidConfig("draft_len must be >= 1".into()));
        }
        if !(self.fallback_threshold > 0.0 && self.fallback_threshold <= 1.0) {
            return Err(SpecError::InvalidConfig(format!(
                "fallback_threshold must be in (0, 1], got {}",
                self.fallback_threshold
            )));
        }
        if self.rollback_threshold.is_nan() || self.rollback_threshold <= 0.0 {
            return Err(SpecError::InvalidConfig(format!(
                "rollback_threshold must be > 0, got {}",
                self.rollback_threshold
            )));
        }
        Ok(())
    }
}

/// Greedy draft burst, cut short when the draft is not confident enough.
pub fn propose_draft(
    draft: &NGramModel,
    context: &[TokenId],
    draft_len: usize,
    fallback_threshold: f64,
) -> Vec<TokenId> {
    let mut ctx = context.to_vec();
    let mut out = Vec::with_capacity(draft_len);
    while out.len() < draft_len {
        if draft.max_prob(&ctx) < fallback_threshold {
            break;
        }
        let tok = draft.argmax(&ctx);
        out.push(tok);
        ctx.push(tok);
    }
    out
}

/// Number of leading draft tokens whose cross-entropy under the target stays
/// within `rollback_threshold`.
pub fn accepted_prefix(
    target: &NGramModel,
    context: &[TokenId],
    draft: &[TokenId],
    rollback_threshold: f64,
) -> usize {
    let mut ctx = context.to_vec();
    for (i, &tok) in draft.iter().enumerate() {
        let ce = -target.prob(&ctx, tok).ln();
        if ce > rollback_threshold {
            return i;
        }
        ctx.push(tok);
    }
    draft.len()
}

pub fn decode_draft_pair(
    model: &NGramModel,
    prompt: &[TokenId],
    max_tokens: usize,
    cfg: &DraftPairConfig,
    sampler_cfg: SamplerConfig,
) -> Result<Vec<DecodeIteration>, SpecError> {
    cfg.validate()?;
    let mut state = SessionState::new(model, prompt, max_tokens, Sampler::new(sampler_cfg));
    while !state.done() {
        let draft = propose_draft(
            &cfg.draft,
            &state.context,
            cfg.draft_len,
            cfg.fallback_threshold,
        );
        let acc = accepted_prefix(model, &state.context, &draft, cfg.rollback_threshold);
        let mut tokens = draft[..acc].to_vec();
        let mut ctx = state.context.clone();
        ctx.extend_from_slice(&tokens);
        tokens.push(state.sampler.next_token(model, &ctx));
        state.emit(tokens, acc);
    }
    Ok(state.finish())
}
