use super::mitigation::MitigationPolicy;
use super::packet::Framer;
use super::session::{run_session, SessionConfig, SessionLog};
use super::StreamError;
use crate::lm::{SamplerConfig, TokenId};
use crate::seed::derive_seed;
use crate::specdec::Engine;

/// A user-facing endpoint: submit a prompt, receive the streamed response.
pub trait QueryClient {
    /// Generates up to `max_tokens` tokens.
    fn query_with_budget(
        &mut self,
        prompt: &[TokenId],
        max_tokens: usize,
    ) -> Result<SessionLog, StreamError>;

    /// The budget `query` uses.
    fn max_tokens(&self) -> usize;

    fn query(&mut self, prompt: &[TokenId]) -> Result<SessionLog, StreamError> {
        let budget = self.max_tokens();
        self.query_with_budget(prompt, budget)
    }

    /// Per-iteration token counts as the user sees them.
    fn query_counts(&mut self, prompt: &[TokenId]) -> Result<Vec<usize>, StreamError> {
        Ok(self.query(prompt)?.token_counts())
    }
}

/// Client talking to an in-process server. Each query gets a distinct
/// sampler seed derived from the base seed and the query number.
#[derive(Debug, Clone)]
pub struct LocalClient {
    pub engine: Engine,
    pub max_tokens: usize,
    pub sampler: SamplerConfig,
    pub policy: MitigationPolicy,
    queries: u64,
}

impl LocalClient {
    pub fn new(engine: Engine, max_tokens: usize, sampler: SamplerConfig) -> Self {
        Self {
            engine,
            max_tokens,
            sampler,
            policy: MitigationPolicy::none(),
            queries: 0,
        }
    }

    pub fn with_policy(mut self, policy: MitigationPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn queries_issued(&self) -> u64 {
        self.queries
    }
}

impl QueryClient for LocalClient {
    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn query_with_budget(
        &mut self,
        prompt: &[TokenId],
        max_tokens: usize,
    ) -> Result<SessionLog, StreamError> {
        let seed = derive_seed(self.sampler.seed, &[self.queries]);
        self.queries += 1;
        let cfg = SessionConfig {
            engine: self.engine.clone(),
            prompt: prompt.to_vec(),
            max_tokens,
            sampler: SamplerConfig {
                seed,
                ..self.sampler
            },
            policy: self.policy.reseeded(derive_seed(seed, &[1])),
            framer: Framer::default(),
        };
        Ok(run_session(&cfg)?.0)
    }
}
