use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::ngram::NGramModel;
use super::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature <= 0.0
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from `probs` with logits scaled by `1 / temperature`.
/// Temperature 0 (or below) is greedy.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], temperature: f64, rng: &mut R) -> usize {
    if temperature <= 0.0 {
        return argmax(probs);
    }
    let max_log = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p.ln() / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = probs
        .iter()
        .map(|&p| {
            if p > 0.0 {
                (p.ln() / temperature - max_log).exp()
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // Rounding left a sliver of mass; fall back to the last positive weight.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Per-session token sampler owning its generator state.
#[derive(Debug, Clone)]
pub struct Sampler {
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(cfg: SamplerConfig) -> Self {
        Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }

    pub fn config(&self) -> SamplerConfig {
        self.cfg
    }

    pub fn next_token(&mut self, model: &NGramModel, context: &[TokenId]) -> TokenId {
        if self.cfg.is_greedy() {
            return model.argmax(context);
        }
        let dist = model.next_distribution(context);
        sample_index(&dist, self.cfg.temperature, &mut self.rng) as TokenId
    }
}

/// Single draw with a fresh generator; see [`Sampler`] for sessions.
pub fn sample(
    model: &NGramModel,
    context: &[TokenId],
    cfg: SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> TokenId {
    if cfg.is_greedy() {
        return model.argmax(context);
    }
    sample_index(&model.next_distribution(context), cfg.temperature, rng) as TokenId
}
