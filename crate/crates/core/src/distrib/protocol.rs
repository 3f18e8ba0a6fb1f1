//! Wire format: every message is a 4-byte big-endian length followed by that
//! many bytes of UTF-8 JSON.

use std::io::{self, Read, Write};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::evaluator::{EvaluationBudget, EvaluatorSpec, FitnessReport};
use crate::hyperparams::LayerKind;

/// Frames larger than this are rejected as corrupt.
pub const MAX_FRAME: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalJob {
    pub job_id: u64,
    /// Canonical JSON export of the network.
    pub network: serde_json::Value,
    pub budget: EvaluationBudget,
    pub evaluator: EvaluatorSpec,
    pub attempt: u32,
    /// Compute layer kinds the network contains.
    #[serde(default)]
    pub requires: Vec<LayerKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    Register {
        capabilities: Vec<LayerKind>,
    },
    Job(EvalJob),
    /// A worker's answer. `job_id` is absent when the job itself could not be
    /// read; exactly one of `report` and `error` is set.
    Report {
        job_id: Option<u64>,
        #[serde(default)]
        report: Option<FitnessReport>,
        #[serde(default)]
        error: Option<String>,
    },
    Heartbeat,
    Shutdown,
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let body = serde_json::to_vec(msg).expect("messages always serialize");
    let mut frame = Vec::with_capacity(body.len() + 4);
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    frame
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    w.write_all(&encode(msg))?;
    w.flush()
}

/// Reads one frame body; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn decode(body: &[u8]) -> Result<Message, serde_json::Error> {
    serde_json::from_slice(body)
}

/// Sending half of a connection.
pub trait FrameSink: Send {
    fn send(&mut self, msg: &Message) -> io::Result<()>;
}

/// Receiving half of a connection; yields raw frame bodies so the caller
/// decides how to handle undecodable ones.
pub trait FrameSource: Send {
    fn recv(&mut self) -> io::Result<Option<Vec<u8>>>;
}

impl<W: Write + Send> FrameSink for W {
    fn send(&mut self, msg: &Message) -> io::Result<()> {
        write_frame(self, msg)
    }
}

pub struct StreamSource<R>(pub R);

impl<R: Read + Send> FrameSource for StreamSource<R> {
    fn recv(&mut self) -> io::Result<Option<Vec<u8>>> {
        read_frame(&mut self.0)
    }
}

/// In-memory byte pipe carrying whole frames.
pub struct PipeSink(pub mpsc::Sender<Vec<u8>>);
pub struct PipeSource(pub mpsc::Receiver<Vec<u8>>);

/// Two connected ends: `(a_sink, b_source)` and `(b_sink, a_source)`.
pub fn pipe() -> ((PipeSink, PipeSource), (PipeSink, PipeSource)) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    ((PipeSink(a_tx), PipeSource(a_rx)), (PipeSink(b_tx), PipeSource(b_rx)))
}

impl FrameSink for PipeSink {
    fn send(&mut self, msg: &Message) -> io::Result<()> {
        self.0
            .send(encode(msg))
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer closed"))
    }
}

impl PipeSink {
    /// Sends raw bytes as one frame body; lets tests inject malformed data.
    pub fn send_raw(&mut self, body: &[u8]) -> io::Result<()> {
        let mut frame = (body.len() as u32).to_be_bytes().to_vec();
        frame.extend_from_slice(body);
        self.0
            .send(frame)
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer closed"))
    }
}

impl FrameSource for PipeSource {
    fn recv(&mut self) -> io::Result<Option<Vec<u8>>> {
        match self.0.recv() {
            Ok(frame) => read_frame(&mut frame.as_slice()),
            Err(_) => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_is_big_endian_length_prefixed() {
        let frame = encode(&Message::Heartbeat);
        let body = br#"{"type":"HEARTBEAT"}"#;
        assert_eq!(&frame[..4], &(body.len() as u32).to_be_bytes());
        assert_eq!(&frame[4..], body);
        let mut cursor = frame.as_slice();
        assert_eq!(decode(&read_frame(&mut cursor).unwrap().unwrap()).unwrap(), Message::Heartbeat);
        assert_eq!(read_frame(&mut cursor).unwrap(), None);
    }

    #[test]
    fn oversized_frames_rejected() {
        let mut bytes = ((MAX_FRAME + 1) as u32).to_be_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(read_frame(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn message_kinds_round_trip() {
        let msgs = [
            Message::Register {
                capabilities: vec![LayerKind::Dense],
            },
            Message::Report {
                job_id: Some(3),
                report: Some(FitnessReport::new(3, 0.5)),
                error: None,
            },
            Message::Report {
                job_id: None,
                report: None,
                error: Some("bad".into()),
            },
            Message::Shutdown,
        ];
        for m in msgs {
            let frame = encode(&m);
            assert_eq!(decode(&frame[4..]).unwrap(), m);
        }
    }

    #[test]
    fn pipes_carry_frames() {
        let ((mut a_sink, mut a_source), (mut b_sink, mut b_source)) = pipe();
        a_sink.send(&Message::Heartbeat).unwrap();
        assert_eq!(decode(&b_source.recv().unwrap().unwrap()).unwrap(), Message::Heartbeat);
        b_sink.send(&Message::Shutdown).unwrap();
        assert_eq!(decode(&a_source.recv().unwrap().unwrap()).unwrap(), Message::Shutdown);
        drop(b_sink);
        assert_eq!(a_source.recv().unwrap(), None);
    }
}
