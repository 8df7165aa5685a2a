//! Message schemas, the binary frame, two interchangeable carriers, and
//! per-round byte accounting.

mod carrier;
mod frame;
mod message;

pub use carrier::{channel_pair, ChannelLink, Link, TcpLink, TcpServer};
pub use frame::{Frame, MsgType, HEADER_LEN, MAX_PAYLOAD};
pub use message::{
    decode_prototypes, encode_prototypes, prototype_payload_len, ClientReport, Control, Envelope, Message,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wire bytes exchanged with one client in one round. Data frames carry
/// prototypes or parameters; control covers RoundControl and Error frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteTotals {
    pub upload: u64,
    pub download: u64,
    pub control_upload: u64,
    pub control_download: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Upload,
    Download,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Meter {
    totals: BTreeMap<(u32, u32), ByteTotals>,
}

impl Meter {
    pub fn record(&mut self, round: u32, client: u32, dir: Direction, frame: &Frame) {
        let t = self.totals.entry((round, client)).or_default();
        let n = frame.wire_len() as u64;
        match (dir, frame.msg_type.is_control()) {
            (Direction::Upload, false) => t.upload += n,
            (Direction::Download, false) => t.download += n,
            (Direction::Upload, true) => t.control_upload += n,
            (Direction::Download, true) => t.control_download += n,
        }
    }

    pub fn totals(&self, round: u32, client: u32) -> ByteTotals {
        self.totals.get(&(round, client)).copied().unwrap_or_default()
    }

    /// `(round, client, totals)` in order.
    pub fn entries(&self) -> impl Iterator<Item = (u32, u32, ByteTotals)> + '_ {
        self.totals.iter().map(|(&(r, c), &t)| (r, c, t))
    }
}

/// Server side of a session set: one link per client, demultiplexed by
/// client id, with every frame metered.
pub struct Hub {
    links: BTreeMap<u32, Box<dyn Link>>,
    meter: Meter,
}

impl Hub {
    pub fn new(links: Vec<(u32, Box<dyn Link>)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (id, link) in links {
            if map.insert(id, link).is_some() {
                return Err(Error::Session(format!("duplicate client id {id}")));
            }
        }
        Ok(Hub { links: map, meter: Meter::default() })
    }

    pub fn client_ids(&self) -> Vec<u32> {
        self.links.keys().copied().collect()
    }

    fn link(&mut self, client: u32) -> Result<&mut Box<dyn Link>> {
        self.links.get_mut(&client).ok_or_else(|| Error::Session(format!("no session for client {client}")))
    }

    pub fn send(&mut self, client: u32, env: &Envelope) -> Result<()> {
        let frame = env.to_frame();
        self.link(client)?.send(&frame)?;
        self.meter.record(env.round, client, Direction::Download, &frame);
        Ok(())
    }

    /// Receives the next message from `client`. Frames claiming another
    /// client id are a protocol error.
    pub fn recv(&mut self, client: u32) -> Result<Envelope> {
        let frame = self.link(client)?.recv()?;
        self.meter.record(frame.round, client, Direction::Upload, &frame);
        if frame.client_id != client {
            return Err(Error::Protocol(format!("client {client} sent a frame tagged {}", frame.client_id)));
        }
        Envelope::from_frame(&frame)
    }

    pub fn meter(&self) -> &Meter {
        &self.meter
    }
}
