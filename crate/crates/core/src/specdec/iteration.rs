use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::lm::{NGramModel, Sampler, TokenId, EOS};

/// Tokens released to the client by one decoder step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct DecodeIteration {
    pub index: usize,
    pub tokens: Vec<TokenId>,
    /// How many of `tokens` came from an accepted speculation.
    pub speculated_accepted: usize,
}

/// Concatenated tokens of a decoded session.
pub fn output_tokens(iterations: &[DecodeIteration]) -> Vec<TokenId> {
    iterations
        .iter()
        .flat_map(|it| it.tokens.iter().copied())
        .collect()
}

pub fn token_counts(iterations: &[DecodeIteration]) -> Vec<usize> {
    iterations.iter().map(|it| it.tokens.len()).collect()
}

/// Length of the longest prefix of `draft` that matches the target's greedy
/// continuation of `context`.
pub fn verify_greedy(target: &NGramModel, context: &[TokenId], draft: &[TokenId]) -> usize {
    let mut ctx = context.to_vec();
    for (i, &tok) in draft.iter().enumerate() {
        if target.argmax(&ctx) != tok {
            return i;
        }
        ctx.push(tok);
    }
    draft.len()
}

/// Shared bookkeeping for every engine: the growing context, the token
/// budget, and stopping at EOS.
pub(crate) struct SessionState<'m> {
    pub model: &'m NGramModel,
    pub context: Vec<TokenId>,
    pub sampler: Sampler,
    produced: usize,
    max_tokens: usize,
    iterations: Vec<DecodeIteration>,
    done: bool,
}

impl<'m> SessionState<'m> {
    pub fn new(
        model: &'m NGramModel,
        prompt: &[TokenId],
        max_tokens: usize,
        sampler: Sampler,
    ) -> Self {
        Self {
            model,
            context: prompt.to_vec(),
            sampler,
            produced: 0,
            max_tokens,
            iterations: Vec::new(),
            done: max_tokens == 0,
        }
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn fresh_token(&mut self) -> TokenId {
        self.sampler.next_token(self.model, &self.context)
    }

    /// Pushes one iteration, cutting it at EOS or at the token budget.
    /// Returns the number of tokens actually emitted.
    pub fn emit(&mut self, mut tokens: Vec<TokenId>, speculated: usize) -> usize {
        if let Some(pos) = tokens.iter().position(|&t| t == EOS) {
            tokens.truncate(pos);
            self.done = true;
        }
        let room = self.max_tokens - self.produced;
        if tokens.len() >= room {
            tokens.truncate(room);
            self.done = true;
        }
        if tokens.is_empty() {
            self.done = true;
            return 0;
        }
        let emitted = tokens.len();
        self.produced += emitted;
        self.context.extend_from_slice(&tokens);
        self.iterations.push(DecodeIteration {
            index: self.iterations.len(),
            speculated_accepted: speculated.min(emitted),
            tokens,
        });
        emitted
    }

    pub fn finish(self) -> Vec<DecodeIteration> {
        self.iterations
    }
}
