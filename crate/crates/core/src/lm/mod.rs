//! Word-level tokenization and the seeded n-gram language model used as the
//! stand-in target and draft model.

mod ngram;
mod sampler;
mod vocab;

use thiserror::Error;

pub use ngram::{NGramModel, DEFAULT_ALPHA};
pub use sampler::{argmax, sample, sample_index, Sampler, SamplerConfig};
pub use vocab::{TokenId, UnknownPolicy, Vocab, BOS, BOS_STR, EOS, EOS_STR, UNK, UNK_STR};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("n-gram order must be at least 1, got {0}")]
    InvalidOrder(usize),
    #[error("smoothing constant must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("malformed model: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Tokenizes `text` against `vocab`, rejecting unknown words.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<Vec<TokenId>, LmError> {
    vocab.tokenize(text, UnknownPolicy::Reject)
}

pub fn train_ngram(
    vocab: Vocab,
    corpus: &[Vec<TokenId>],
    order: usize,
    alpha: f64,
) -> Result<NGramModel, LmError> {
    NGramModel::train(vocab, corpus, order, alpha)
}

/// Reads one document per line from a UTF-8 corpus file and trains a model.
pub fn train_from_corpus_file(
    path: &std::path::Path,
    order: usize,
    alpha: f64,
) -> Result<NGramModel, LmError> {
    let text = std::fs::read_to_string(path)?;
    NGramModel::train_on_text(&text, order, alpha)
}

pub fn save_model(model: &NGramModel, path: &std::path::Path) -> Result<(), LmError> {
    std::fs::write(path, model.to_text())?;
    Ok(())
}

pub fn load_model(path: &std::path::Path) -> Result<NGramModel, LmError> {
    NGramModel::from_text(&std::fs::read_to_string(path)?)
}
