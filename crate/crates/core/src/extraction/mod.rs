//! Datastore extraction against the retrieval engine: a user who sees how
//! many tokens arrive per iteration learns which tokens were copied from
//! the datastore.

use schemars::JsonSchema;
use std::collections::HashSet;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{TokenId, Vocab, UNK};
use crate::specdec::RetrievalDatastore;
use crate::stream::{QueryClient, SessionLog, StreamError};

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("session uses mitigation {0}; per-iteration token counts are not observable")]
    Mitigated(String),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema,
)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Random,
    CommonWords,
    FeedbackReuse,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::CommonWords => "common-words",
            StrategyKind::FeedbackReuse => "feedback-reuse",
        }
    }
}

/// Frequency-ranked words restricted to a vocabulary.
#[derive(Debug, Clone)]
pub struct Wordlist {
    pub words: Vec<TokenId>,
    pub weights: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl Wordlist {
    /// Parses one word per line, optionally followed by a tab and a count.
    /// Without counts, rank `r` gets weight `1/r`. Words outside `vocab`
    /// are skipped; at most `top` words are kept.
    pub fn parse(text: &str, vocab: &Vocab, top: usize) -> Result<Self, ExtractionError> {
        let mut words = Vec::new();
        let mut weights = Vec::new();
        for (rank, line) in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
        {
            let (word, count) = match line.split_once('\t') {
                Some((w, c)) => {
                    let c: f64 = c.trim().parse().map_err(|_| {
                        ExtractionError::InvalidStrategy(format!(
                            "bad count in wordlist line {line:?}"
                        ))
                    })?;
                    (w.trim(), c)
                }
                None => (line, 1.0 / (rank + 1) as f64),
            };
            let Some(id) = vocab.id(word) else { continue };
            if Vocab::is_reserved(id) || count <= 0.0 {
                continue;
            }
            words.push(id);
            weights.push(count);
            if words.len() == top {
                break;
            }
        }
        Self::new(words, weights)
    }

    pub fn new(words: Vec<TokenId>, weights: Vec<f64>) -> Result<Self, ExtractionError> {
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| ExtractionError::InvalidStrategy(format!("wordlist weights: {e}")))?;
        Ok(Self {
            words,
            weights,
            dist,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        self.words[self.dist.sample(rng)]
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ExtractionStrategy {
    pub kind: StrategyKind,
    pub query_budget: usize,
    pub tokens_per_query: usize,
    /// Ids `0..vocab_size` minus reserved ones are the random alphabet.
    pub vocab_size: usize,
    /// Used by common-words and as the feedback fallback.
    pub wordlist: Arc<Wordlist>,
}

impl ExtractionStrategy {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        if self.query_budget == 0 || self.tokens_per_query == 0 {
            return Err(ExtractionError::InvalidStrategy(
                "query budget and tokens per query must be >= 1".into(),
            ));
        }
        if self.kind == StrategyKind::Random && self.vocab_size <= UNK as usize + 1 {
            return Err(ExtractionError::InvalidStrategy(
                "vocabulary has no ordinary tokens".into(),
            ));
        }
        Ok(())
    }
}

/// A leaked fragment: the token preceding an iteration and the tokens that
/// iteration took from the datastore.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
pub struct Leak {
    pub context: TokenId,
    pub block: Vec<TokenId>,
}

impl Leak {
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut v = Vec::with_capacity(self.block.len() + 1);
        v.push(self.context);
        v.extend_from_slice(&self.block);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct LedgerEntry {
    pub leak: Leak,
    pub first_query: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct LeakLedger {
    pub entries: Vec<LedgerEntry>,
    /// `(queries issued, cumulative unique leaks)` after every query.
    pub timeline: Vec<(usize, usize)>,
    #[serde(skip)]
    seen: HashSet<Leak>,
}

impl LeakLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Returns true if the leak was new.
    pub fn record(&mut self, leak: Leak, query: usize) -> bool {
        if self.seen.len() != self.entries.len() {
            // deserialized ledger: rebuild the index
            self.seen = self.entries.iter().map(|e| e.leak.clone()).collect();
        }
        if self.seen.contains(&leak) {
            return false;
        }
        self.seen.insert(leak.clone());
        self.entries.push(LedgerEntry {
            leak,
            first_query: query,
        });
        true
    }

    /// Fraction of entries found verbatim, context token included, in the
    /// store. 1.0 for an empty ledger.
    pub fn soundness(&self, store: &RetrievalDatastore) -> f64 {
        if self.entries.is_empty() {
            return 1.0;
        }
        let ok = self
            .entries
            .iter()
            .filter(|e| store.contains(&e.leak.tokens()))
            .count();
        ok as f64 / self.entries.len() as f64
    }

    pub fn unsound<'a>(
        &'a self,
        store: &'a RetrievalDatastore,
    ) -> impl Iterator<Item = &'a LedgerEntry> {
        self.entries
            .iter()
            .filter(move |e| !store.contains(&e.leak.tokens()))
    }

    pub fn timeline_csv(&self) -> String {
        let mut out = String::from("queries,unique_leaks\n");
        for (q, n) in &self.timeline {
            out.push_str(&format!("{q},{n}\n"));
        }
        out
    }
}

/// Leaks visible in one session. Only per-iteration token counts are used:
/// an iteration of `c > 1` tokens copied its first `c - 1` tokens from the
/// datastore, the last one being the target's own token.
pub fn detect_leaks(log: &SessionLog) -> Result<Vec<Leak>, ExtractionError> {
    if !log.policy.is_none() {
        return Err(ExtractionError::Mitigated(log.policy.label()));
    }
    let mut out = Vec::new();
    let mut prev = log.prompt.last().copied();
    for it in &log.iterations {
        if it.tokens.len() > 1 {
            if let Some(context) = prev {
                out.push(Leak {
                    context,
                    block: it.tokens[..it.tokens.len() - 1].to_vec(),
                });
            }
        }
        if let Some(&last) = it.tokens.last() {
            prev = Some(last);
        }
    }
    Ok(out)
}

/// Attacker-side state carried between queries.
#[derive(Debug, Clone, Default)]
pub struct QueryState {
    pub ledger: LeakLedger,
    /// Ledger entries already used as a prompt tail.
    pub reused: usize,
}

/// Next prompt for `strategy`. Feedback reuse takes the oldest leak not yet
/// reused and puts it, context token first, at the end of the prompt; with
/// nothing left to reuse it behaves like common-words.
pub fn build_query<R: Rng + ?Sized>(
    strategy: &ExtractionStrategy,
    state: &mut QueryState,
    rng: &mut R,
) -> Vec<TokenId> {
    let n = strategy.tokens_per_query;
    let first = UNK + 1;
    let common = |rng: &mut R, k: usize| {
        (0..k)
            .map(|_| strategy.wordlist.sample(rng))
            .collect::<Vec<_>>()
    };
    match strategy.kind {
        StrategyKind::Random => (0..n)
            .map(|_| rng.gen_range(first..strategy.vocab_size as TokenId))
            .collect(),
        StrategyKind::CommonWords => common(rng, n),
        StrategyKind::FeedbackReuse => match state.ledger.entries.get(state.reused) {
            Some(entry) => {
                state.reused += 1;
                let tail = entry.leak.tokens();
                let mut prompt = common(rng, n.saturating_sub(tail.len()));
                prompt.extend(tail);
                prompt
            }
            None => common(rng, n),
        },
    }
}

pub fn run_extraction(
    client: &mut dyn QueryClient,
    strategy: &ExtractionStrategy,
    seed: u64,
) -> Result<LeakLedger, ExtractionError> {
    strategy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = QueryState::default();
    for q in 0..strategy.query_budget {
        let prompt = build_query(strategy, &mut state, &mut rng);
        let log = client.query(&prompt)?;
        for leak in detect_leaks(&log)? {
            state.ledger.record(leak, q);
        }
        let unique = state.ledger.len();
        state.ledger.timeline.push((q + 1, unique));
    }
    Ok(state.ledger)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specdec::{DecodeIteration, RetrievalParams};
    use crate::stream::MitigationPolicy;

    fn log(prompt: Vec<TokenId>, iters: Vec<Vec<TokenId>>) -> SessionLog {
        SessionLog {
            engine: "retrieval".into(),
            policy: MitigationPolicy::none(),
            prompt,
            iterations: iters
                .into_iter()
                .enumerate()
                .map(|(index, tokens)| DecodeIteration {
                    index,
                    speculated_accepted: tokens.len() - 1,
                    tokens,
                })
                .collect(),
            packets: Vec::new(),
            complete: true,
        }
    }

    fn vocab(words: &[&str]) -> Vocab {
        let mut v = Vocab::new();
        for w in words {
            v.insert(w);
        }
        v
    }

    #[test]
    fn single_token_iterations_leak_nothing() {
        assert!(detect_leaks(&log(vec![5], vec![vec![6], vec![7]]))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn blocks_carry_their_context() {
        let leaks =
            detect_leaks(&log(vec![3, 5], vec![vec![6], vec![7, 8, 9], vec![4, 4]])).unwrap();
        assert_eq!(
            leaks,
            vec![
                Leak {
                    context: 6,
                    block: vec![7, 8]
                },
                Leak {
                    context: 9,
                    block: vec![4]
                },
            ]
        );
    }

    #[test]
    fn mitigated_sessions_are_rejected() {
        let mut l = log(vec![3], vec![vec![4]]);
        l.policy = MitigationPolicy::constant(64);
        assert!(matches!(
            detect_leaks(&l),
            Err(ExtractionError::Mitigated(_))
        ));
    }

    fn strategy(kind: StrategyKind, v: &Vocab, wl: Wordlist) -> ExtractionStrategy {
        ExtractionStrategy {
            kind,
            query_budget: 1,
            tokens_per_query: 6,
            vocab_size: v.len(),
            wordlist: Arc::new(wl),
        }
    }

    #[test]
    fn random_over_single_word() {
        let v = vocab(&["a"]);
        let a = v.id("a").unwrap();
        let s = strategy(
            StrategyKind::Random,
            &v,
            Wordlist::new(vec![a], vec![1.0]).unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            build_query(&s, &mut QueryState::default(), &mut rng),
            vec![a; 6]
        );
    }

    #[test]
    fn feedback_reuses_verbatim_then_falls_back() {
        let v = vocab(&["w", "x", "y", "z"]);
        let id = |w| v.id(w).unwrap();
        let s = strategy(
            StrategyKind::FeedbackReuse,
            &v,
            Wordlist::new(vec![id("w")], vec![1.0]).unwrap(),
        );
        let mut state = QueryState::default();
        state.ledger.record(
            Leak {
                context: id("x"),
                block: vec![id("y"), id("z")],
            },
            0,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = build_query(&s, &mut state, &mut rng);
        assert_eq!(q.len(), 6);
        assert!(q.ends_with(&[id("x"), id("y"), id("z")]));
        assert_eq!(build_query(&s, &mut state, &mut rng), vec![id("w"); 6]);
    }

    #[test]
    fn common_words_follow_counts() {
        let v = vocab(&["a", "b", "c", "d"]);
        let wl = Wordlist::parse("a\t50\nb\t30\nzzz\t9\nc\t15\nd\t5\n", &v, 10).unwrap();
        assert_eq!(wl.len(), 4);
        let s = strategy(StrategyKind::CommonWords, &v, wl);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 4];
        let mut state = QueryState::default();
        let draws = 10_000;
        let per = s.tokens_per_query;
        for _ in 0..draws / per + 1 {
            for t in build_query(&s, &mut state, &mut rng) {
                counts[v.token(t).unwrap().as_bytes()[0] as usize - b'a' as usize] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for (c, expected) in counts.iter().zip([0.5, 0.3, 0.15, 0.05]) {
            let got = *c as f64 / total as f64;
            assert!(
                (got - expected).abs() <= 0.05 * expected.max(0.1),
                "{got} vs {expected}"
            );
        }
    }

    #[test]
    fn zipf_weights_without_counts() {
        let v = vocab(&["a", "b"]);
        let wl = Wordlist::parse("a\nb\n", &v, 10).unwrap();
        assert_eq!(wl.weights, vec![1.0, 0.5]);
    }

    #[test]
    fn soundness_uses_substring_search() {
        let store = RetrievalDatastore::new(vec![vec![10, 11, 12, 13]], RetrievalParams::default())
            .unwrap();
        let mut ledger = LeakLedger::new();
        ledger.record(
            Leak {
                context: 11,
                block: vec![12, 13],
            },
            0,
        );
        assert_eq!(ledger.soundness(&store), 1.0);
        ledger.record(
            Leak {
                context: 10,
                block: vec![12],
            },
            1,
        );
        assert_eq!(ledger.soundness(&store), 0.5);
        assert_eq!(ledger.unsound(&store).count(), 1);
    }
}
