//! The network adversary's view: packet arrival times and lengths, turned
//! into traces and fixed-length feature vectors.

use schemars::JsonSchema;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::Vocab;
use crate::stream::{ObservationSource, PacketRecord, TapError};

pub const DEFAULT_FEATURE_LEN: usize = 256;

#[derive(Debug, Error)]
pub enum ObserverError {
    #[error(transparent)]
    Tap(#[from] TapError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("trace {trace_id}: {msg}")]
    BadRow { trace_id: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Sample {
    pub inter_arrival: f64,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Trace {
    pub samples: Vec<Sample>,
    pub label: Option<String>,
    /// False when the capture ended inside a packet.
    pub complete: bool,
}

impl Trace {
    pub fn sizes(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.size).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    /// Builds a trace from a server log, as an observer with a perfect tap
    /// on the simulated clock would see it.
    pub fn from_packets(packets: &[PacketRecord]) -> Self {
        let mut prev = 0u64;
        let samples = packets
            .iter()
            .map(|p| {
                let s = Sample {
                    inter_arrival: (p.sent_at - prev) as f64,
                    size: p.observable_size() as u32,
                };
                prev = p.sent_at;
                s
            })
            .collect();
        Self {
            samples,
            label: None,
            complete: true,
        }
    }
}

/// Reads observations until the stream ends. A stream cut inside a packet
/// yields the samples seen so far with `complete = false`.
pub fn capture(source: &mut dyn ObservationSource) -> Result<Trace, ObserverError> {
    let mut samples = Vec::new();
    let mut prev = 0.0;
    let mut complete = true;
    loop {
        match source.next_observation() {
            Ok(Some(obs)) => {
                samples.push(Sample {
                    inter_arrival: obs.at - prev,
                    size: obs.len,
                });
                prev = obs.at;
            }
            Ok(None) => break,
            Err(TapError::Truncated { .. }) => {
                complete = false;
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Trace {
        samples,
        label: None,
        complete,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

/// Packet sizes truncated or zero-padded to `len` entries.
pub fn featurize(trace: &Trace, len: usize) -> FeatureVector {
    let mut values: Vec<f64> = trace
        .samples
        .iter()
        .take(len)
        .map(|s| s.size as f64)
        .collect();
    values.resize(len, 0.0);
    FeatureVector { values }
}

/// Byte statistics of the response vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct VocabStats {
    /// Mean bytes a token contributes to the stream, separator included.
    pub mean_token_bytes: f64,
}

impl VocabStats {
    /// Frequency-weighted mean over a tokenized corpus, counting one
    /// separator byte per token.
    pub fn from_corpus<'a, I>(vocab: &Vocab, docs: I, separator_len: usize) -> Self
    where
        I: IntoIterator<Item = &'a [crate::lm::TokenId]>,
    {
        let (mut bytes, mut n) = (0usize, 0usize);
        for doc in docs {
            for &t in doc {
                bytes += vocab.byte_len(t) + separator_len;
                n += 1;
            }
        }
        Self {
            mean_token_bytes: if n == 0 { 1.0 } else { bytes as f64 / n as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TokenCountEstimate {
    pub counts: Vec<usize>,
    /// False when the session was padded or aggregated, so sizes no longer
    /// track tokens.
    pub reliable: bool,
}

pub fn estimate_token_counts(
    trace: &Trace,
    stats: VocabStats,
    sizes_are_raw: bool,
) -> TokenCountEstimate {
    let counts = trace
        .samples
        .iter()
        .map(|s| ((s.size as f64 / stats.mean_token_bytes).round() as usize).max(1))
        .collect();
    TokenCountEstimate {
        counts,
        reliable: sizes_are_raw,
    }
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return f64::NAN;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (xs[i] - mx, ys[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    sxy / (sxx * syy).sqrt()
}

/// Mean absolute per-position size difference over the shared prefix, with
/// missing positions counted as zero-size packets.
pub fn mean_size_difference(a: &Trace, b: &Trace) -> f64 {
    let n = a.len().max(b.len());
    if n == 0 {
        return 0.0;
    }
    let at = |t: &Trace, i: usize| t.samples.get(i).map_or(0.0, |s| s.size as f64);
    (0..n).map(|i| (at(a, i) - at(b, i)).abs()).sum::<f64>() / n as f64
}

const CSV_HEADER: [&str; 5] = ["trace_id", "label", "seq", "inter_arrival", "size"];

/// Writes traces as CSV rows `(trace_id, label, seq, inter_arrival, size)`.
/// A trace without packets is written as one row with empty sample fields.
pub fn write_traces_csv<W: Write>(w: W, traces: &[(String, Trace)]) -> Result<(), ObserverError> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(CSV_HEADER)?;
    for (id, trace) in traces {
        let label = trace.label.as_deref().unwrap_or("");
        if trace.is_empty() {
            out.write_record([id.as_str(), label, "", "", ""])?;
        }
        for (seq, s) in trace.samples.iter().enumerate() {
            out.write_record([
                id.as_str(),
                label,
                &seq.to_string(),
                &s.inter_arrival.to_string(),
                &s.size.to_string(),
            ])?;
        }
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads the CSV written by [`write_traces_csv`], preserving first-seen
/// trace order.
pub fn read_traces_csv<R: Read>(r: R) -> Result<Vec<(String, Trace)>, ObserverError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out: Vec<(String, Trace)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let id = field(0).to_owned();
        let bad = |msg: String| ObserverError::BadRow {
            trace_id: id.clone(),
            msg,
        };
        if out.last().is_none_or(|(last, _)| *last != id) {
            let label = field(1);
            out.push((
                id.clone(),
                Trace {
                    samples: Vec::new(),
                    label: (!label.is_empty()).then(|| label.to_owned()),
                    complete: true,
                },
            ));
        }
        if field(2).is_empty() {
            continue;
        }
        let seq: usize = field(2)
            .parse()
            .map_err(|_| bad(format!("bad seq {:?}", field(2))))?;
        let inter_arrival: f64 = field(3)
            .parse()
            .map_err(|_| bad(format!("bad inter_arrival {:?}", field(3))))?;
        let size: u32 = field(4)
            .parse()
            .map_err(|_| bad(format!("bad size {:?}", field(4))))?;
        let trace = &mut out.last_mut().expect("pushed above").1;
        if seq != trace.samples.len() {
            return Err(bad(format!(
                "expected seq {}, got {seq}",
                trace.samples.len()
            )));
        }
        trace.samples.push(Sample {
            inter_arrival,
            size,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{queue_link, PacketSink};

    fn trace(sizes: &[u32]) -> Trace {
        Trace {
            samples: sizes
                .iter()
                .map(|&size| Sample {
                    inter_arrival: 1.0,
                    size,
                })
                .collect(),
            label: None,
            complete: true,
        }
    }

    #[test]
    fn capture_passes_sizes_through() {
        let (mut sink, mut tap) = queue_link();
        for (i, n) in [12usize, 40, 7].into_iter().enumerate() {
            sink.send(&vec![b'x'; n], i as u64 + 1).unwrap();
        }
        drop(sink);
        let t = capture(&mut tap).unwrap();
        assert_eq!(t.sizes(), vec![12, 40, 7]);
        assert!(t.complete);
    }

    #[test]
    fn featurize_pads_and_truncates() {
        assert_eq!(
            featurize(&trace(&[3, 4]), 4).values,
            vec![3.0, 4.0, 0.0, 0.0]
        );
        let long: Vec<u32> = (1..=300).collect();
        let fv = featurize(&trace(&long), 256);
        assert_eq!(fv.values.len(), 256);
        assert_eq!(fv.values[255], 256.0);
    }

    #[test]
    fn exact_division_estimate() {
        let est = estimate_token_counts(
            &trace(&[12, 4, 8]),
            VocabStats {
                mean_token_bytes: 4.0,
            },
            true,
        );
        assert_eq!(est.counts, vec![3, 1, 2]);
        assert!(est.reliable);
        assert!(
            !estimate_token_counts(
                &trace(&[1024]),
                VocabStats {
                    mean_token_bytes: 4.0
                },
                false
            )
            .reliable
        );
    }

    #[test]
    fn csv_round_trip() {
        let traces = vec![
            ("t0".to_owned(), trace(&[5, 9, 2]).with_label("p1")),
            ("t1".to_owned(), trace(&[]).with_label("p2")),
            ("t2".to_owned(), trace(&[1]).with_label("p1")),
        ];
        let mut buf = Vec::new();
        write_traces_csv(&mut buf, &traces).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("trace_id,label,seq,inter_arrival,size\n"));
        let back = read_traces_csv(buf.as_slice()).unwrap();
        assert_eq!(back, traces);
    }

    #[test]
    fn pearson_sanity() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
