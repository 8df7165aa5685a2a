//! Typed messages carried in frames, and the prototype payload layout:
//! `u16 class_count`, then per class `u16 class_id | u64 sample_count |
//! u32 dim | dim × f64`, all big-endian.

use serde::{Deserialize, Serialize};

use super::frame::{Frame, MsgType};
use crate::error::{Error, Result};
use crate::metrics::ConfusionCounts;
use crate::prototypes::PrototypeSet;

/// Payload size of a prototype set with `classes` classes of dimension `dim`.
pub fn prototype_payload_len(classes: usize, dim: usize) -> usize {
    2 + classes * (2 + 8 + 4 + 8 * dim)
}

pub fn encode_prototypes(set: &PrototypeSet) -> Vec<u8> {
    let dim = set.dim().unwrap_or(0);
    let mut out = Vec::with_capacity(prototype_payload_len(set.len(), dim));
    out.extend_from_slice(&(set.len() as u16).to_be_bytes());
    for (class, p) in set.iter() {
        out.extend_from_slice(&class.to_be_bytes());
        out.extend_from_slice(&p.count.to_be_bytes());
        out.extend_from_slice(&(p.vector.len() as u32).to_be_bytes());
        for v in &p.vector {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Framing(format!("truncated {}", self.what)));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if !self.bytes.is_empty() {
            return Err(Error::Framing(format!("{} trailing bytes after {}", self.bytes.len(), self.what)));
        }
        Ok(())
    }
}

pub fn decode_prototypes(bytes: &[u8]) -> Result<PrototypeSet> {
    let mut c = Cursor { bytes, what: "prototype payload" };
    let classes = c.u16()?;
    let mut set = PrototypeSet::new();
    for _ in 0..classes {
        let class = c.u16()?;
        let count = c.u64()?;
        let dim = c.u32()? as usize;
        if set.contains(class) {
            return Err(Error::Protocol(format!("class {class} appears twice")));
        }
        let raw = c.take(dim.checked_mul(8).ok_or_else(|| Error::Framing("dimension overflow".into()))?)?;
        let vector = raw.chunks_exact(8).map(|b| f64::from_be_bytes(b.try_into().expect("8 bytes"))).collect();
        set.insert(class, vector, count).map_err(|e| Error::Protocol(e.to_string()))?;
    }
    c.finish()?;
    Ok(set)
}

/// What a client reports after each local update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub epoch_losses: Vec<f64>,
    pub confusion: ConfusionCounts,
    pub degenerate: bool,
    pub train_samples: u64,
    pub wall_ms: f64,
}

/// RoundControl payloads, JSON-encoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Control {
    /// First frame of a client session; the frame header carries the id.
    Hello,
    Report(ClientReport),
    /// Ends the session after the final round.
    Finish,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    PrototypeUpload(PrototypeSet),
    GlobalBroadcast(PrototypeSet),
    /// Training-set size plus a trainable-parameter checkpoint.
    ParamUpload { samples: u64, checkpoint: Vec<u8> },
    ParamBroadcast { samples: u64, checkpoint: Vec<u8> },
    Control(Control),
    Error(String),
}

fn param_payload(samples: u64, checkpoint: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + checkpoint.len());
    out.extend_from_slice(&samples.to_be_bytes());
    out.extend_from_slice(checkpoint);
    out
}

fn parse_param_payload(bytes: &[u8]) -> Result<(u64, Vec<u8>)> {
    let mut c = Cursor { bytes, what: "parameter payload" };
    let samples = c.u64()?;
    Ok((samples, c.bytes.to_vec()))
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::PrototypeUpload(_) => MsgType::PrototypeUpload,
            Message::GlobalBroadcast(_) => MsgType::GlobalBroadcast,
            Message::ParamUpload { .. } => MsgType::ParamUpload,
            Message::ParamBroadcast { .. } => MsgType::ParamBroadcast,
            Message::Control(_) => MsgType::RoundControl,
            Message::Error(_) => MsgType::Error,
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        match self {
            Message::PrototypeUpload(s) | Message::GlobalBroadcast(s) => encode_prototypes(s),
            Message::ParamUpload { samples, checkpoint } | Message::ParamBroadcast { samples, checkpoint } => {
                param_payload(*samples, checkpoint)
            }
            Message::Control(c) => serde_json::to_vec(c).expect("control messages serialize"),
            Message::Error(msg) => msg.as_bytes().to_vec(),
        }
    }

    pub fn decode_payload(msg_type: MsgType, bytes: &[u8]) -> Result<Message> {
        Ok(match msg_type {
            MsgType::PrototypeUpload => Message::PrototypeUpload(decode_prototypes(bytes)?),
            MsgType::GlobalBroadcast => Message::GlobalBroadcast(decode_prototypes(bytes)?),
            MsgType::ParamUpload => {
                let (samples, checkpoint) = parse_param_payload(bytes)?;
                Message::ParamUpload { samples, checkpoint }
            }
            MsgType::ParamBroadcast => {
                let (samples, checkpoint) = parse_param_payload(bytes)?;
                Message::ParamBroadcast { samples, checkpoint }
            }
            MsgType::RoundControl => Message::Control(
                serde_json::from_slice(bytes).map_err(|e| Error::Protocol(format!("bad control payload: {e}")))?,
            ),
            MsgType::Error => Message::Error(String::from_utf8_lossy(bytes).into_owned()),
        })
    }
}

/// A message with its frame addressing.
#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub round: u32,
    pub client_id: u32,
    pub message: Message,
}

impl Envelope {
    pub fn new(round: u32, client_id: u32, message: Message) -> Self {
        Envelope { round, client_id, message }
    }

    pub fn to_frame(&self) -> Frame {
        Frame::new(self.message.msg_type(), self.round, self.client_id, self.message.encode_payload())
    }

    pub fn from_frame(frame: &Frame) -> Result<Self> {
        Ok(Envelope {
            round: frame.round,
            client_id: frame.client_id,
            message: Message::decode_payload(frame.msg_type, &frame.payload)?,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.to_frame().encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_frame(&Frame::decode(bytes)?)
    }
}
