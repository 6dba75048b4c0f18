use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::lm::Vocab;
use crate::specdec::DecodeIteration;

/// One streamed response unit. The observable size is all an on-path
/// observer learns about it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct Packet {
    pub seq: u64,
    pub payload_len: usize,
    pub pad_len: usize,
    /// Simulated clock tick at which the packet was sent.
    pub sent_at: u64,
    /// Decoder iterations carried by this packet.
    pub iterations: usize,
    /// Response text carried by the packet.
    pub text: String,
}

impl Packet {
    pub fn observable_size(&self) -> usize {
        self.payload_len + self.pad_len
    }

    /// Bytes placed on the wire: the text followed by zero padding.
    pub fn wire_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.observable_size());
        out.extend_from_slice(self.text.as_bytes());
        out.resize(self.observable_size(), 0);
        out
    }
}

/// Turns iterations into text chunks whose concatenation is the detokenized
/// response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct Framer {
    pub separator: String,
}

impl Default for Framer {
    fn default() -> Self {
        Self {
            separator: " ".to_owned(),
        }
    }
}

impl Framer {
    pub fn new(separator: impl Into<String>) -> Self {
        Self {
            separator: separator.into(),
        }
    }

    /// Text chunk for one iteration; every chunk but the first starts with
    /// the separator so chunks concatenate to the full transcript.
    pub fn chunk(&self, iter: &DecodeIteration, vocab: &Vocab, first: bool) -> String {
        let body = vocab.detokenize_with(&iter.tokens, &self.separator);
        if first || iter.tokens.is_empty() {
            body
        } else {
            format!("{}{}", self.separator, body)
        }
    }

    pub fn frame(&self, iter: &DecodeIteration, vocab: &Vocab, first: bool) -> Packet {
        let text = self.chunk(iter, vocab, first);
        Packet {
            seq: iter.index as u64,
            payload_len: text.len(),
            pad_len: 0,
            sent_at: iter.index as u64 + 1,
            iterations: 1,
            text,
        }
    }

    /// One unpadded packet per iteration; the clock advances one tick per
    /// iteration.
    pub fn frame_session(&self, iterations: &[DecodeIteration], vocab: &Vocab) -> Vec<Packet> {
        iterations
            .iter()
            .enumerate()
            .map(|(i, it)| self.frame(it, vocab, i == 0))
            .collect()
    }
}

/// Frames a single (leading) iteration with the default separator.
pub fn frame_iteration(iter: &DecodeIteration, vocab: &Vocab) -> Packet {
    Framer::default().frame(iter, vocab, true)
}
