use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::mitigation::{apply_mitigation, MitigationPolicy};
use super::packet::{Framer, Packet};
use super::transport::PacketSink;
use super::StreamError;
use crate::lm::{SamplerConfig, TokenId, Vocab};
use crate::specdec::{DecodeIteration, Engine};

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub engine: Engine,
    pub prompt: Vec<TokenId>,
    pub max_tokens: usize,
    pub sampler: SamplerConfig,
    pub policy: MitigationPolicy,
    pub framer: Framer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct PacketRecord {
    pub seq: u64,
    pub payload_len: usize,
    pub pad_len: usize,
    pub sent_at: u64,
    pub iterations: usize,
}

impl PacketRecord {
    pub fn observable_size(&self) -> usize {
        self.payload_len + self.pad_len
    }
}

impl From<&Packet> for PacketRecord {
    fn from(p: &Packet) -> Self {
        Self {
            seq: p.seq,
            payload_len: p.payload_len,
            pad_len: p.pad_len,
            sent_at: p.sent_at,
            iterations: p.iterations,
        }
    }
}

/// Server-side record of one streamed response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SessionLog {
    pub engine: String,
    pub policy: MitigationPolicy,
    pub prompt: Vec<TokenId>,
    pub iterations: Vec<DecodeIteration>,
    /// Packets actually written; shorter than planned if the transport failed.
    pub packets: Vec<PacketRecord>,
    pub complete: bool,
}

impl SessionLog {
    pub fn token_counts(&self) -> Vec<usize> {
        self.iterations.iter().map(|it| it.tokens.len()).collect()
    }

    pub fn packet_sizes(&self) -> Vec<usize> {
        self.packets
            .iter()
            .map(PacketRecord::observable_size)
            .collect()
    }

    pub fn output(&self) -> Vec<TokenId> {
        crate::specdec::output_tokens(&self.iterations)
    }

    pub fn transcript(&self, vocab: &Vocab) -> String {
        vocab.detokenize(&self.output())
    }

    pub fn overhead(&self) -> f64 {
        let payload: usize = self.packets.iter().map(|p| p.payload_len).sum();
        let observable: usize = self.packets.iter().map(PacketRecord::observable_size).sum();
        if payload == 0 {
            1.0
        } else {
            observable as f64 / payload as f64
        }
    }
}

/// Decodes, frames and mitigates a session without touching a transport.
pub fn run_session(cfg: &SessionConfig) -> Result<(SessionLog, Vec<Packet>), StreamError> {
    let iterations = cfg.engine.decode(&cfg.prompt, cfg.max_tokens, cfg.sampler);
    let framed = cfg
        .framer
        .frame_session(&iterations, cfg.engine.target.vocab());
    let packets = apply_mitigation(&framed, &cfg.policy)?;
    let log = SessionLog {
        engine: cfg.engine.name().to_owned(),
        policy: cfg.policy,
        prompt: cfg.prompt.clone(),
        iterations,
        packets: packets.iter().map(PacketRecord::from).collect(),
        complete: true,
    };
    Ok((log, packets))
}

/// Runs a session and writes every packet to `sink`. A transport failure
/// returns the log of what was sent so far.
pub fn serve(cfg: &SessionConfig, sink: &mut dyn PacketSink) -> Result<SessionLog, StreamError> {
    let (mut log, packets) = run_session(cfg)?;
    for (i, p) in packets.iter().enumerate() {
        if let Err(source) = sink.send(&p.wire_bytes(), p.sent_at) {
            log.packets.truncate(i);
            log.complete = false;
            return Err(StreamError::Transport {
                log: Box::new(log),
                source,
            });
        }
    }
    if let Err(source) = sink.finish() {
        log.complete = false;
        return Err(StreamError::Transport {
            log: Box::new(log),
            source,
        });
    }
    Ok(log)
}
