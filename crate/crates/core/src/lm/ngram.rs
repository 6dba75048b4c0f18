use std::collections::HashMap;
use std::fmt::Write as _;

use super::vocab::{TokenId, Vocab, BOS, EOS};
use super::LmError;

pub const DEFAULT_ALPHA: f64 = 0.1;

const FORMAT_HEADER: &str = "specleak-ngram v1";

/// Successor counts observed after one context, sorted by token id.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Successors {
    total: u64,
    counts: Vec<(TokenId, u64)>,
    mode: TokenId,
    mode_count: u64,
}

impl Successors {
    fn from_map(map: HashMap<TokenId, u64>) -> Self {
        let mut counts: Vec<(TokenId, u64)> = map.into_iter().collect();
        counts.sort_unstable_by_key(|&(tok, _)| tok);
        let total = counts.iter().map(|&(_, c)| c).sum();
        // Sorted by id, so the first strictly larger count wins ties.
        let (mut mode, mut mode_count) = (0, 0);
        for &(tok, c) in &counts {
            if c > mode_count {
                mode = tok;
                mode_count = c;
            }
        }
        Self {
            total,
            counts,
            mode,
            mode_count,
        }
    }

    fn count(&self, tok: TokenId) -> u64 {
        self.counts
            .binary_search_by_key(&tok, |&(t, _)| t)
            .map_or(0, |i| self.counts[i].1)
    }
}

/// Additively smoothed n-gram model. Immutable once trained.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    alpha: f64,
    vocab: Vocab,
    table: HashMap<Vec<TokenId>, Successors>,
}

impl NGramModel {
    /// Counts every (context, successor) pair with `order - 1` BOS tokens of
    /// left padding and a trailing EOS per sequence.
    pub fn train(
        vocab: Vocab,
        corpus: &[Vec<TokenId>],
        order: usize,
        alpha: f64,
    ) -> Result<Self, LmError> {
        if order == 0 {
            return Err(LmError::InvalidOrder(order));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(LmError::InvalidAlpha(alpha));
        }
        if corpus.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        let v = vocab.len() as TokenId;
        let ctx_len = order - 1;
        let mut raw: HashMap<Vec<TokenId>, HashMap<TokenId, u64>> = HashMap::new();
        let mut padded = Vec::new();
        for seq in corpus {
            if let Some(&bad) = seq.iter().find(|&&t| t >= v) {
                return Err(LmError::Format(format!(
                    "token id {bad} outside vocabulary"
                )));
            }
            padded.clear();
            padded.resize(ctx_len, BOS);
            padded.extend_from_slice(seq);
            padded.push(EOS);
            for i in ctx_len..padded.len() {
                let ctx = padded[i - ctx_len..i].to_vec();
                *raw.entry(ctx).or_default().entry(padded[i]).or_default() += 1;
            }
        }
        let table = raw
            .into_iter()
            .map(|(ctx, succ)| (ctx, Successors::from_map(succ)))
            .collect();
        Ok(Self {
            order,
            alpha,
            vocab,
            table,
        })
    }

    /// Convenience: tokenizes one document per line and trains.
    pub fn train_on_text(text: &str, order: usize, alpha: f64) -> Result<Self, LmError> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let vocab = Vocab::from_lines(lines.iter().copied());
        let corpus = lines
            .iter()
            .map(|l| vocab.tokenize(l, Default::default()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::train(vocab, &corpus, order, alpha)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn context_count(&self) -> usize {
        self.table.len()
    }

    /// The `order - 1` trailing tokens of `context`, BOS-padded on the left.
    pub fn context_key(&self, context: &[TokenId]) -> Vec<TokenId> {
        let ctx_len = self.order - 1;
        let mut key = Vec::with_capacity(ctx_len);
        if context.len() < ctx_len {
            key.resize(ctx_len - context.len(), BOS);
            key.extend_from_slice(context);
        } else {
            key.extend_from_slice(&context[context.len() - ctx_len..]);
        }
        key
    }

    fn successors(&self, context: &[TokenId]) -> Option<&Successors> {
        let ctx_len = self.order - 1;
        if context.len() >= ctx_len {
            self.table.get(&context[context.len() - ctx_len..])
        } else {
            self.table.get(&self.context_key(context))
        }
    }

    /// Whether the trailing context was observed during training.
    pub fn has_context(&self, context: &[TokenId]) -> bool {
        self.successors(context).is_some()
    }

    pub fn next_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        let v = self.vocab.len();
        let av = self.alpha * v as f64;
        match self.successors(context) {
            None => vec![1.0 / v as f64; v],
            Some(succ) => {
                let denom = succ.total as f64 + av;
                let mut dist = vec![self.alpha / denom; v];
                for &(tok, c) in &succ.counts {
                    dist[tok as usize] = (c as f64 + self.alpha) / denom;
                }
                dist
            }
        }
    }

    pub fn prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        let v = self.vocab.len() as f64;
        match self.successors(context) {
            None => 1.0 / v,
            Some(succ) => {
                (succ.count(token) as f64 + self.alpha) / (succ.total as f64 + self.alpha * v)
            }
        }
    }

    /// Greedy next token: highest probability, lowest id on ties.
    pub fn argmax(&self, context: &[TokenId]) -> TokenId {
        self.successors(context).map_or(0, |s| s.mode)
    }

    /// Probability of the greedy next token.
    pub fn max_prob(&self, context: &[TokenId]) -> f64 {
        let v = self.vocab.len() as f64;
        match self.successors(context) {
            None => 1.0 / v,
            Some(s) => (s.mode_count as f64 + self.alpha) / (s.total as f64 + self.alpha * v),
        }
    }

    /// Serializes to the versioned text format:
    ///
    /// ```text
    /// specleak-ngram v1
    /// order <n>
    /// alpha <f64>
    /// vocab <count>
    /// <one token per line>
    /// contexts <count>
    /// <ctx ids space-separated>\t<tok>:<count> <tok>:<count> ...
    /// ```
    ///
    /// Contexts are sorted, so equal models serialize to equal bytes.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{FORMAT_HEADER}");
        let _ = writeln!(out, "order {}", self.order);
        let _ = writeln!(out, "alpha {}", self.alpha);
        let _ = writeln!(out, "vocab {}", self.vocab.len());
        for word in self.vocab.entries() {
            let _ = writeln!(out, "{word}");
        }
        let mut keys: Vec<&Vec<TokenId>> = self.table.keys().collect();
        keys.sort();
        let _ = writeln!(out, "contexts {}", keys.len());
        for key in keys {
            let ctx: Vec<String> = key.iter().map(u32::to_string).collect();
            let succ: Vec<String> = self.table[key]
                .counts
                .iter()
                .map(|(t, c)| format!("{t}:{c}"))
                .collect();
            let _ = writeln!(out, "{}\t{}", ctx.join(" "), succ.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, LmError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| LmError::Format(format!("unexpected end of file, expected {what}")))
        };
        let (ln, header) = next("header")?;
        if header != FORMAT_HEADER {
            return Err(LmError::Parse {
                line: ln,
                msg: format!("expected {FORMAT_HEADER:?}"),
            });
        }
        let order: usize = parse_field(next("order")?, "order")?;
        let alpha: f64 = parse_field(next("alpha")?, "alpha")?;
        let vocab_len: usize = parse_field(next("vocab")?, "vocab")?;
        let mut entries = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            entries.push(next("vocabulary entry")?.1.to_owned());
        }
        let vocab = Vocab::from_entries(entries)?;
        let n_ctx: usize = parse_field(next("contexts")?, "contexts")?;
        let mut table = HashMap::with_capacity(n_ctx);
        for _ in 0..n_ctx {
            let (ln, line) = next("context row")?;
            let bad = |msg: &str| LmError::Parse {
                line: ln,
                msg: msg.to_owned(),
            };
            let (ctx_part, succ_part) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let ctx = ctx_part
                .split_whitespace()
                .map(|t| t.parse::<TokenId>().map_err(|_| bad("bad context id")))
                .collect::<Result<Vec<_>, _>>()?;
            if ctx.len() + 1 != order {
                return Err(bad("context length does not match order"));
            }
            let mut succ = HashMap::new();
            for pair in succ_part.split_whitespace() {
                let (t, c) = pair
                    .split_once(':')
                    .ok_or_else(|| bad("bad successor pair"))?;
                let t: TokenId = t.parse().map_err(|_| bad("bad successor id"))?;
                let c: u64 = c.parse().map_err(|_| bad("bad successor count"))?;
                if t as usize >= vocab.len() {
                    return Err(bad("successor outside vocabulary"));
                }
                succ.insert(t, c);
            }
            table.insert(ctx, Successors::from_map(succ));
        }
        if order == 0 {
            return Err(LmError::InvalidOrder(order));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(LmError::InvalidAlpha(alpha));
        }
        Ok(Self {
            order,
            alpha,
            vocab,
            table,
        })
    }
}

fn parse_field<T: std::str::FromStr>((ln, line): (usize, &str), name: &str) -> Result<T, LmError> {
    line.strip_prefix(name)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| LmError::Parse {
            line: ln,
            msg: format!("expected `{name} <value>`"),
        })
}
