//! Packetization of decoder iterations, server-side mitigations, and the
//! framed transports the observer taps.

mod client;
mod mitigation;
mod packet;
mod session;
mod transport;

use thiserror::Error;

pub use client::{LocalClient, QueryClient};
pub use mitigation::{
    aggregate, apply_mitigation, overhead, MitigationPolicy, Padding, DEFAULT_CONSTANT_PAD,
};
pub use packet::{frame_iteration, Framer, Packet};
pub use session::{run_session, serve, PacketRecord, SessionConfig, SessionLog};
pub use transport::{
    encode_frame, queue_link, read_frame, write_frame, Observation, ObservationSource, PacketSink,
    QueueSink, QueueTap, StreamTap, TapError, TcpSink,
};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("packet {seq} carries {payload_len} payload bytes, more than the constant pad size {target_size}")]
    PayloadExceedsPad {
        seq: u64,
        payload_len: usize,
        target_size: usize,
    },
    #[error("invalid mitigation policy: {0}")]
    InvalidPolicy(String),
    #[error("transport failed after {} packets: {source}", log.packets.len())]
    Transport {
        log: Box<SessionLog>,
        #[source]
        source: std::io::Error,
    },
}
