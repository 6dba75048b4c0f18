use std::collections::HashMap;

use super::LmError;

/// Dense token identifier. Ids are assigned in first-seen order.
pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK: TokenId = 2;

pub const BOS_STR: &str = "<s>";
pub const EOS_STR: &str = "</s>";
pub const UNK_STR: &str = "<unk>";

/// What `tokenize` does with a word that is not in the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnknownPolicy {
    #[default]
    Reject,
    MapToUnk,
}

/// Word-level vocabulary. Reserved tokens occupy ids 0..3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    entries: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut vocab = Self {
            entries: Vec::new(),
            index: HashMap::new(),
        };
        for reserved in [BOS_STR, EOS_STR, UNK_STR] {
            vocab.insert(reserved);
        }
        vocab
    }

    /// Builds a vocabulary from whitespace-delimited text lines.
    pub fn from_lines<'a, I>(lines: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut vocab = Self::new();
        for line in lines {
            for word in line.split_whitespace() {
                vocab.insert(word);
            }
        }
        vocab
    }

    /// Rebuilds a vocabulary from its ordered entry list. The first three
    /// entries must be the reserved tokens.
    pub fn from_entries(entries: Vec<String>) -> Result<Self, LmError> {
        if entries.len() < 3
            || entries[0] != BOS_STR
            || entries[1] != EOS_STR
            || entries[2] != UNK_STR
        {
            return Err(LmError::Format(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (id, word) in entries.iter().enumerate() {
            if index.insert(word.clone(), id as TokenId).is_some() {
                return Err(LmError::Format(format!(
                    "duplicate vocabulary entry {word:?}"
                )));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn insert(&mut self, word: &str) -> TokenId {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.entries.len() as TokenId;
        self.entries.push(word.to_owned());
        self.index.insert(word.to_owned(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.entries.get(id as usize).map(String::as_str)
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn is_reserved(id: TokenId) -> bool {
        id <= UNK
    }

    /// UTF-8 byte length of a token's surface form (0 for unknown ids).
    pub fn byte_len(&self, id: TokenId) -> usize {
        self.token(id).map_or(0, str::len)
    }

    pub fn tokenize(&self, text: &str, policy: UnknownPolicy) -> Result<Vec<TokenId>, LmError> {
        text.split_whitespace()
            .map(|word| match (self.id(word), policy) {
                (Some(id), _) => Ok(id),
                (None, UnknownPolicy::MapToUnk) => Ok(UNK),
                (None, UnknownPolicy::Reject) => Err(LmError::UnknownWord(word.to_owned())),
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        self.detokenize_with(ids, " ")
    }

    pub fn detokenize_with(&self, ids: &[TokenId], separator: &str) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push_str(separator);
            }
            out.push_str(self.token(id).unwrap_or(UNK_STR));
        }
        out
    }
}
