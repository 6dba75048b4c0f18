//! Length-prefixed packet transport.
//!
//! Wire format, per packet: a 4-byte big-endian unsigned length `L`, then `L`
//! opaque bytes. The receiving tap hands out only `(arrival time, L)`.

use schemars::JsonSchema;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

/// Sending half of a transport.
pub trait PacketSink {
    fn send(&mut self, payload: &[u8], sent_at: u64) -> io::Result<()>;

    fn finish(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// What an on-path observer learns about one packet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Observation {
    /// Simulated ticks, or seconds since capture start for wall-clock taps.
    pub at: f64,
    pub len: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum TapError {
    #[error("stream truncated inside packet {index}")]
    Truncated { index: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Receiving half as seen by the observer.
pub trait ObservationSource {
    /// `Ok(None)` on a clean end of stream.
    fn next_observation(&mut self) -> Result<Option<Observation>, TapError>;
}

pub fn encode_frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "packet too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)
}

/// Reads one frame; `Ok(None)` at a clean boundary, `UnexpectedEof` when the
/// stream stops inside a frame.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut header = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let mut payload = vec![0u8; u32::from_be_bytes(header) as usize];
    r.read_exact(&mut payload)?;
    Ok(Some(payload))
}

/// Frames travelling through the in-process queue keep their send tick.
#[derive(Debug)]
struct QueuedFrame {
    sent_at: u64,
    bytes: Vec<u8>,
}

pub struct QueueSink {
    tx: mpsc::Sender<QueuedFrame>,
}

impl PacketSink for QueueSink {
    fn send(&mut self, payload: &[u8], sent_at: u64) -> io::Result<()> {
        self.tx
            .send(QueuedFrame {
                sent_at,
                bytes: encode_frame(payload),
            })
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "queue receiver dropped"))
    }
}

pub struct QueueTap {
    rx: mpsc::Receiver<QueuedFrame>,
    index: usize,
}

impl ObservationSource for QueueTap {
    fn next_observation(&mut self) -> Result<Option<Observation>, TapError> {
        let Ok(frame) = self.rx.recv() else {
            return Ok(None);
        };
        let index = self.index;
        self.index += 1;
        let mut cursor = frame.bytes.as_slice();
        match read_frame(&mut cursor) {
            Ok(Some(payload)) => Ok(Some(Observation {
                at: frame.sent_at as f64,
                len: payload.len() as u32,
            })),
            Ok(None) | Err(_) => Err(TapError::Truncated { index }),
        }
    }
}

/// In-process transport; timestamps are the simulated send ticks.
pub fn queue_link() -> (QueueSink, QueueTap) {
    let (tx, rx) = mpsc::channel();
    (QueueSink { tx }, QueueTap { rx, index: 0 })
}

pub struct TcpSink {
    writer: BufWriter<TcpStream>,
}

impl TcpSink {
    pub fn new(stream: TcpStream) -> Self {
        Self {
            writer: BufWriter::new(stream),
        }
    }
}

impl PacketSink for TcpSink {
    fn send(&mut self, payload: &[u8], _sent_at: u64) -> io::Result<()> {
        write_frame(&mut self.writer, payload)?;
        // one TCP write per packet so arrival times follow iterations
        self.writer.flush()
    }

    fn finish(&mut self) -> io::Result<()> {
        self.writer.flush()?;
        self.writer.get_ref().shutdown(std::net::Shutdown::Write)
    }
}

/// Wall-clock tap over any byte stream (TCP in practice).
pub struct StreamTap<R: Read> {
    reader: BufReader<R>,
    start: Instant,
    index: usize,
}

impl<R: Read> StreamTap<R> {
    pub fn new(reader: R) -> Self {
        Self {
            reader: BufReader::new(reader),
            start: Instant::now(),
            index: 0,
        }
    }
}

impl<R: Read> ObservationSource for StreamTap<R> {
    fn next_observation(&mut self) -> Result<Option<Observation>, TapError> {
        match read_frame(&mut self.reader) {
            Ok(Some(payload)) => {
                self.index += 1;
                Ok(Some(Observation {
                    at: self.start.elapsed().as_secs_f64(),
                    len: payload.len() as u32,
                }))
            }
            Ok(None) => Ok(None),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                Err(TapError::Truncated { index: self.index })
            }
            Err(e) => Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_layout_is_big_endian_length_prefix() {
        assert_eq!(encode_frame(b"abc"), vec![0, 0, 0, 3, b'a', b'b', b'c']);
        assert_eq!(encode_frame(&[]), vec![0, 0, 0, 0]);
        let big = vec![7u8; 0x0102];
        assert_eq!(&encode_frame(&big)[..4], &[0, 0, 1, 2]);
    }

    #[test]
    fn read_back_and_truncation() {
        let mut bytes = encode_frame(b"hello");
        bytes.extend(encode_frame(b"xy"));
        let mut cur = bytes.as_slice();
        assert_eq!(read_frame(&mut cur).unwrap().unwrap(), b"hello");
        assert_eq!(read_frame(&mut cur).unwrap().unwrap(), b"xy");
        assert!(read_frame(&mut cur).unwrap().is_none());

        let cut = &bytes[..bytes.len() - 1];
        let mut tap = StreamTap::new(cut);
        assert_eq!(tap.next_observation().unwrap().unwrap().len, 5);
        assert!(matches!(
            tap.next_observation(),
            Err(TapError::Truncated { index: 1 })
        ));
    }

    #[test]
    fn queue_reports_ticks_and_lengths() {
        let (mut sink, mut tap) = queue_link();
        sink.send(b"abcd", 1).unwrap();
        sink.send(b"z", 3).unwrap();
        drop(sink);
        let a = tap.next_observation().unwrap().unwrap();
        let b = tap.next_observation().unwrap().unwrap();
        assert_eq!((a.at, a.len), (1.0, 4));
        assert_eq!((b.at, b.len), (3.0, 1));
        assert!(tap.next_observation().unwrap().is_none());
    }
}
