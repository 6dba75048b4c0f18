//! Testbed for packet-size side channels in speculative decoding.

pub mod extraction;
pub mod fingerprint;
pub mod harness;
pub mod lm;
pub mod observer;
pub mod probes;
pub mod seed;
pub mod specdec;
pub mod stream;
