//! Runs a whole federation in one process: clients on their own threads,
//! the server on the calling thread, connected by either carrier.

use std::net::SocketAddr;
use std::time::Duration;

use super::local::ClientState;
use super::report::{Protocol, TrainReport};
use super::server::{client_run, fedavg_run, server_run};
use super::RoundConfig;
use crate::error::{Error, Result};
use crate::model::LcnnConfig;
use crate::transport::{channel_pair, Hub, Link, TcpLink, TcpServer};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Carrier {
    InProcess,
    /// TCP over the given listen address; port 0 picks a free port.
    Tcp(String),
}

impl std::str::FromStr for Carrier {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inproc" => Ok(Carrier::InProcess),
            "tcp" => Ok(Carrier::Tcp("127.0.0.1:0".into())),
            _ => match s.strip_prefix("tcp:") {
                Some(addr) => Ok(Carrier::Tcp(addr.into())),
                None => Err(Error::Config(format!("unknown transport `{s}` (inproc | tcp:addr)"))),
            },
        }
    }
}

pub struct Simulation {
    pub report: TrainReport,
    /// Final client states, in client id order.
    pub clients: Vec<ClientState>,
}

fn run_server(hub: &mut Hub, protocol: Protocol, model: &LcnnConfig, config: &RoundConfig) -> Result<TrainReport> {
    match protocol {
        Protocol::Prototypes => server_run(hub, config),
        Protocol::FedAvg => fedavg_run(hub, model, config),
    }
}

type ClientThread<'s> = std::thread::ScopedJoinHandle<'s, (ClientState, Result<()>)>;

fn join(handles: Vec<ClientThread<'_>>) -> Result<Vec<ClientState>> {
    let mut states = Vec::new();
    for h in handles {
        let (state, res) = h.join().map_err(|_| Error::State("client thread panicked".into()))?;
        if let Err(e) = res {
            log::warn!("client {} ended with error: {e}", state.client_id);
        }
        states.push(state);
    }
    states.sort_by_key(|s| s.client_id);
    Ok(states)
}

pub fn simulate(
    clients: Vec<ClientState>,
    model: &LcnnConfig,
    config: &RoundConfig,
    carrier: &Carrier,
    protocol: Protocol,
) -> Result<Simulation> {
    config.validate()?;
    let mut ids: Vec<u32> = clients.iter().map(|c| c.client_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("client ids must be distinct".into()));
    }
    std::thread::scope(|scope| {
        let (report, handles) = match carrier {
            Carrier::InProcess => {
                let mut server_links: Vec<(u32, Box<dyn Link>)> = Vec::new();
                let mut handles = Vec::new();
                for mut state in clients {
                    let (server_end, mut client_end) = channel_pair();
                    server_links.push((state.client_id, Box::new(server_end)));
                    handles.push(scope.spawn(move || {
                        let res = client_run(&mut client_end, &mut state, config);
                        (state, res)
                    }));
                }
                let report = Hub::new(server_links).and_then(|mut hub| run_server(&mut hub, protocol, model, config));
                (report, handles)
            }
            Carrier::Tcp(addr) => {
                let server = TcpServer::bind(addr.as_str())?;
                let local: SocketAddr = server.local_addr()?;
                let mut handles = Vec::new();
                for mut state in clients {
                    handles.push(scope.spawn(move || {
                        let res = TcpLink::connect(local, state.client_id, Duration::from_secs(10))
                            .and_then(|mut link| client_run(&mut link, &mut state, config));
                        (state, res)
                    }));
                }
                let report = server.accept_clients(&ids).and_then(|links| {
                    let links = links.into_iter().map(|(id, l)| (id, Box::new(l) as Box<dyn Link>)).collect();
                    let mut hub = Hub::new(links)?;
                    run_server(&mut hub, protocol, model, config)
                });
                (report, handles)
            }
        };
        let states = join(handles)?;
        Ok(Simulation { report: report?, clients: states })
    })
}
