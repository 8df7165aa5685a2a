//! Length-prefixed binary frame: `u32 length | u8 type | u32 round |
//! u32 client_id | payload`, all integers big-endian.

use std::io::{ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 13;
pub const MAX_PAYLOAD: usize = 64 * 1024 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum MsgType {
    PrototypeUpload = 1,
    GlobalBroadcast = 2,
    ParamUpload = 3,
    ParamBroadcast = 4,
    RoundControl = 5,
    Error = 6,
}

impl MsgType {
    pub fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            1 => MsgType::PrototypeUpload,
            2 => MsgType::GlobalBroadcast,
            3 => MsgType::ParamUpload,
            4 => MsgType::ParamBroadcast,
            5 => MsgType::RoundControl,
            6 => MsgType::Error,
            other => return Err(Error::Protocol(format!("unknown message type {other}"))),
        })
    }

    /// Control and error frames; everything else carries model data.
    pub fn is_control(self) -> bool {
        matches!(self, MsgType::RoundControl | MsgType::Error)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub round: u32,
    /// Sender or addressee; 0 for server-origin broadcasts.
    pub client_id: u32,
    pub payload: Vec<u8>,
}

struct Header {
    len: usize,
    msg_type: MsgType,
    round: u32,
    client_id: u32,
}

fn be32(b: &[u8]) -> u32 {
    u32::from_be_bytes(b.try_into().expect("4 bytes"))
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<Header> {
    let len = be32(&h[0..4]) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::Oversize(len));
    }
    Ok(Header { len, msg_type: MsgType::from_byte(h[4])?, round: be32(&h[5..9]), client_id: be32(&h[9..13]) })
}

impl Frame {
    pub fn new(msg_type: MsgType, round: u32, client_id: u32, payload: Vec<u8>) -> Self {
        Frame { msg_type, round, client_id, payload }
    }

    /// Bytes on the wire, header included.
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    fn header(&self) -> Result<[u8; HEADER_LEN]> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(Error::Oversize(self.payload.len()));
        }
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&(self.payload.len() as u32).to_be_bytes());
        h[4] = self.msg_type as u8;
        h[5..9].copy_from_slice(&self.round.to_be_bytes());
        h[9..13].copy_from_slice(&self.client_id.to_be_bytes());
        Ok(h)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.header()?);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Decodes exactly one frame; trailing or missing bytes are errors.
    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        let Some(h) = bytes.first_chunk::<HEADER_LEN>() else {
            return Err(Error::Framing(format!("{} bytes is shorter than a frame header", bytes.len())));
        };
        let h = parse_header(h)?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != h.len {
            return Err(Error::Framing(format!("header declares {} payload bytes, found {}", h.len, body.len())));
        }
        Ok(Frame { msg_type: h.msg_type, round: h.round, client_id: h.client_id, payload: body.to_vec() })
    }

    /// Reads one frame from a stream. A clean EOF before the header is a
    /// session error; EOF inside a frame is a framing error.
    pub fn read_from(r: &mut impl Read) -> Result<Frame> {
        let mut h = [0u8; HEADER_LEN];
        let mut got = 0;
        while got < HEADER_LEN {
            match r.read(&mut h[got..]) {
                Ok(0) if got == 0 => return Err(Error::Session("connection closed".into())),
                Ok(0) => return Err(Error::Framing("stream ended inside a frame header".into())),
                Ok(n) => got += n,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::Session(format!("read failed: {e}"))),
            }
        }
        let h = parse_header(&h)?;
        let mut payload = vec![0u8; h.len];
        r.read_exact(&mut payload).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => Error::Framing("stream ended inside a frame payload".into()),
            _ => Error::Session(format!("read failed: {e}")),
        })?;
        Ok(Frame { msg_type: h.msg_type, round: h.round, client_id: h.client_id, payload })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let h = self.header()?;
        let io = |e: std::io::Error| Error::Session(format!("write failed: {e}"));
        w.write_all(&h).map_err(io)?;
        w.write_all(&self.payload).map_err(io)?;
        w.flush().map_err(io)
    }
}
