use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::packet::Packet;
use super::StreamError;

pub const DEFAULT_CONSTANT_PAD: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, JsonSchema)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Padding {
    #[default]
    None,
    /// Every packet is inflated to exactly `target_size` bytes.
    Constant { target_size: usize },
    /// Every packet gets `ε ~ Unif{0..=max_pad}` extra bytes.
    Variable { max_pad: usize, seed: u64 },
}

/// Server-side countermeasure: optional aggregation of `k` iterations per
/// packet, then padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct MitigationPolicy {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<usize>,
    #[serde(default)]
    pub pad: Padding,
}

impl MitigationPolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn constant(target_size: usize) -> Self {
        Self {
            aggregate: None,
            pad: Padding::Constant { target_size },
        }
    }

    pub fn variable(max_pad: usize, seed: u64) -> Self {
        Self {
            aggregate: None,
            pad: Padding::Variable { max_pad, seed },
        }
    }

    pub fn aggregate(k: usize) -> Self {
        Self {
            aggregate: Some(k),
            pad: Padding::None,
        }
    }

    pub fn is_none(&self) -> bool {
        self.aggregate.is_none_or(|k| k == 1) && self.pad == Padding::None
    }

    /// True when packet sizes are no longer a per-iteration byte count.
    pub fn hides_iteration_sizes(&self) -> bool {
        !self.is_none()
    }

    /// Aggregation and padding together; the two are normally studied apart.
    pub fn is_composite(&self) -> bool {
        self.aggregate.is_some() && self.pad != Padding::None
    }

    /// Same policy with the padding generator reseeded, for per-session noise.
    pub fn reseeded(&self, seed: u64) -> Self {
        let pad = match self.pad {
            Padding::Variable { max_pad, .. } => Padding::Variable { max_pad, seed },
            other => other,
        };
        Self { pad, ..*self }
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        if self.aggregate == Some(0) {
            return Err(StreamError::InvalidPolicy(
                "aggregation factor must be >= 1".into(),
            ));
        }
        if let Padding::Constant { target_size: 0 } = self.pad {
            return Err(StreamError::InvalidPolicy(
                "constant pad size must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let pad = match self.pad {
            Padding::None => None,
            Padding::Constant { target_size } => Some(format!("constant({target_size})")),
            Padding::Variable { max_pad, .. } => Some(format!("variable(D={max_pad})")),
        };
        match (self.aggregate, pad) {
            (None, None) => "none".into(),
            (Some(k), None) => format!("aggregate(k={k})"),
            (None, Some(p)) => p,
            (Some(k), Some(p)) => format!("aggregate(k={k})+{p}"),
        }
    }
}

/// Merges every `k` consecutive packets into one.
pub fn aggregate(packets: &[Packet], k: usize) -> Vec<Packet> {
    packets
        .chunks(k.max(1))
        .enumerate()
        .map(|(seq, group)| {
            let text: String = group.iter().map(|p| p.text.as_str()).collect();
            Packet {
                seq: seq as u64,
                payload_len: group.iter().map(|p| p.payload_len).sum(),
                pad_len: 0,
                sent_at: group.last().map_or(0, |p| p.sent_at),
                iterations: group.iter().map(|p| p.iterations).sum(),
                text,
            }
        })
        .collect()
}

/// Applies `policy` to a session's unpadded per-iteration packets.
pub fn apply_mitigation(
    packets: &[Packet],
    policy: &MitigationPolicy,
) -> Result<Vec<Packet>, StreamError> {
    policy.validate()?;
    let mut out = match policy.aggregate {
        Some(k) if k > 1 => aggregate(packets, k),
        _ => packets.to_vec(),
    };
    match policy.pad {
        Padding::None => {}
        Padding::Constant { target_size } => {
            for p in &mut out {
                if p.payload_len > target_size {
                    return Err(StreamError::PayloadExceedsPad {
                        seq: p.seq,
                        payload_len: p.payload_len,
                        target_size,
                    });
                }
                p.pad_len = target_size - p.payload_len;
            }
        }
        Padding::Variable { max_pad, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for p in &mut out {
                p.pad_len = rng.gen_range(0..=max_pad);
            }
        }
    }
    Ok(out)
}

/// Observable bytes under the policy relative to the bare payload bytes.
pub fn overhead(packets: &[Packet]) -> f64 {
    let payload: usize = packets.iter().map(|p| p.payload_len).sum();
    let observable: usize = packets.iter().map(Packet::observable_size).sum();
    if payload == 0 {
        return 1.0;
    }
    observable as f64 / payload as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn packets(sizes: &[usize]) -> Vec<Packet> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, &s)| Packet {
                seq: i as u64,
                payload_len: s,
                pad_len: 0,
                sent_at: i as u64 + 1,
                iterations: 1,
                text: "x".repeat(s),
            })
            .collect()
    }

    fn sizes(ps: &[Packet]) -> Vec<usize> {
        ps.iter().map(Packet::observable_size).collect()
    }

    #[test]
    fn constant_pad_flattens_sizes() {
        let out =
            apply_mitigation(&packets(&[5, 23, 9]), &MitigationPolicy::constant(1024)).unwrap();
        assert_eq!(sizes(&out), vec![1024, 1024, 1024]);
        assert!(overhead(&out) > 50.0);
    }

    #[test]
    fn constant_pad_rejects_oversized_payload() {
        match apply_mitigation(&packets(&[5, 40, 9]), &MitigationPolicy::constant(32)) {
            Err(StreamError::PayloadExceedsPad {
                seq, payload_len, ..
            }) => {
                assert_eq!((seq, payload_len), (1, 40));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn aggregation_sums_partitions() {
        let out =
            apply_mitigation(&packets(&[3, 4, 2, 5, 1]), &MitigationPolicy::aggregate(3)).unwrap();
        assert_eq!(sizes(&out), vec![9, 6]);
        assert_eq!(out[0].iterations, 3);
        assert_eq!(out[1].iterations, 2);
        assert_eq!(out[1].sent_at, 5);
        assert_eq!(out[0].text.len() + out[1].text.len(), 15);
    }

    #[test]
    fn variable_pad_is_bounded_and_uniform() {
        let d = 6;
        let input = packets(&vec![10; 10_000]);
        let out = apply_mitigation(&input, &MitigationPolicy::variable(d, 99)).unwrap();
        let mut hist = [0usize; 7];
        for (p, q) in input.iter().zip(&out) {
            let s = p.observable_size();
            let s2 = q.observable_size();
            assert!(s <= s2 && s2 <= s + d);
            hist[q.pad_len] += 1;
        }
        for count in hist {
            let f = count as f64 / 10_000.0;
            assert!((f - 1.0 / 7.0).abs() < 0.02, "{hist:?}");
        }
    }

    #[test]
    fn variable_pad_ignores_content() {
        let policy = MitigationPolicy::variable(12, 5);
        let a = apply_mitigation(&packets(&[1, 2, 3, 4]), &policy).unwrap();
        let b = apply_mitigation(&packets(&[40, 3, 17, 8]), &policy).unwrap();
        let pads = |ps: &[Packet]| ps.iter().map(|p| p.pad_len).collect::<Vec<_>>();
        assert_eq!(pads(&a), pads(&b));
    }

    #[test]
    fn policy_serde_shape() {
        let p: MitigationPolicy =
            toml::from_str("aggregate = 3\npad = { kind = \"variable\", max_pad = 6, seed = 1 }")
                .unwrap();
        assert_eq!(p.aggregate, Some(3));
        assert!(p.is_composite());
        assert_eq!(p.label(), "aggregate(k=3)+variable(D=6)");
        assert!(MitigationPolicy::aggregate(0).validate().is_err());
    }
}
