//! Carriers: an in-process channel pair and a TCP session per client.
//! Both move encoded frames, so they exercise the same codec.

use std::collections::BTreeSet;
use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use super::frame::{Frame, MsgType};
use super::message::{Control, Envelope, Message};
use crate::error::{Error, Result};

/// One ordered, reliable, bidirectional frame stream.
pub trait Link: Send {
    fn send(&mut self, frame: &Frame) -> Result<()>;
    fn recv(&mut self) -> Result<Frame>;

    fn send_msg(&mut self, env: &Envelope) -> Result<()> {
        self.send(&env.to_frame())
    }

    fn recv_msg(&mut self) -> Result<Envelope> {
        Envelope::from_frame(&self.recv()?)
    }
}

impl<L: Link + ?Sized> Link for Box<L> {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        (**self).send(frame)
    }

    fn recv(&mut self) -> Result<Frame> {
        (**self).recv()
    }
}

pub struct ChannelLink {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
}

/// Two connected in-process endpoints.
pub fn channel_pair() -> (ChannelLink, ChannelLink) {
    let (tx_a, rx_b) = mpsc::channel();
    let (tx_b, rx_a) = mpsc::channel();
    (ChannelLink { tx: tx_a, rx: rx_a }, ChannelLink { tx: tx_b, rx: rx_b })
}

impl Link for ChannelLink {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        self.tx.send(frame.encode()?).map_err(|_| Error::Session("peer hung up".into()))
    }

    fn recv(&mut self) -> Result<Frame> {
        let bytes = self.rx.recv().map_err(|_| Error::Session("peer hung up".into()))?;
        Frame::decode(&bytes)
    }
}

pub struct TcpLink {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpLink {
    fn from_stream(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        let writer = BufWriter::new(stream.try_clone()?);
        Ok(TcpLink { reader: BufReader::new(stream), writer })
    }

    /// Connects and announces `client_id`. Retries refused connections
    /// until `wait` has elapsed, so clients may start before the server.
    pub fn connect(addr: impl ToSocketAddrs, client_id: u32, wait: Duration) -> Result<Self> {
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
        let start = Instant::now();
        let stream = loop {
            match TcpStream::connect(&addrs[..]) {
                Ok(s) => break s,
                Err(e) if start.elapsed() < wait => {
                    log::debug!("connect failed ({e}), retrying");
                    std::thread::sleep(Duration::from_millis(50));
                }
                Err(e) => return Err(Error::Session(format!("cannot connect: {e}"))),
            }
        };
        let mut link = Self::from_stream(stream)?;
        link.send_msg(&Envelope::new(0, client_id, Message::Control(Control::Hello)))?;
        Ok(link)
    }

    pub fn peer_addr(&self) -> Result<SocketAddr> {
        Ok(self.reader.get_ref().peer_addr()?)
    }
}

impl Link for TcpLink {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        frame.write_to(&mut self.writer)
    }

    fn recv(&mut self) -> Result<Frame> {
        Frame::read_from(&mut self.reader)
    }
}

pub struct TcpServer {
    listener: TcpListener,
}

impl TcpServer {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self> {
        Ok(TcpServer { listener: TcpListener::bind(addr)? })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts connections until every id in `expected` has said hello.
    /// Duplicate or unknown ids are answered with an Error frame and
    /// dropped. Returns links ordered by client id.
    pub fn accept_clients(&self, expected: &[u32]) -> Result<Vec<(u32, TcpLink)>> {
        let wanted: BTreeSet<u32> = expected.iter().copied().collect();
        let mut links: Vec<(u32, TcpLink)> = Vec::new();
        while links.len() < wanted.len() {
            let (stream, peer) = self.listener.accept()?;
            stream.set_read_timeout(Some(Duration::from_secs(30)))?;
            let mut link = TcpLink::from_stream(stream)?;
            let hello = match link.recv() {
                Ok(f) => f,
                Err(e) => {
                    log::warn!("dropping {peer}: {e}");
                    continue;
                }
            };
            let id = hello.client_id;
            let is_hello = hello.msg_type == MsgType::RoundControl
                && matches!(Envelope::from_frame(&hello), Ok(Envelope { message: Message::Control(Control::Hello), .. }));
            let problem = if !is_hello {
                Some("expected a hello frame".to_string())
            } else if links.iter().any(|(i, _)| *i == id) {
                Some(format!("duplicate client id {id}"))
            } else if !wanted.contains(&id) {
                Some(format!("unexpected client id {id}"))
            } else {
                None
            };
            if let Some(msg) = problem {
                log::warn!("rejecting {peer}: {msg}");
                // best effort; the peer may already be gone
                let _ = link.send_msg(&Envelope::new(0, id, Message::Error(msg)));
                continue;
            }
            link.reader.get_ref().set_read_timeout(None)?;
            log::info!("client {id} connected from {peer}");
            links.push((id, link));
        }
        links.sort_by_key(|(id, _)| *id);
        Ok(links)
    }
}
