//! The server round loop for both protocols and the matching client loop.

use std::collections::BTreeMap;
use std::time::Instant;

use super::local::{evaluate, local_update, ClientState};
use super::report::{ClientRoundRecord, Protocol, RoundRecord, TrainReport};
use super::RoundConfig;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::losses::SecondTerm;
use crate::metrics::DEFAULT_BETA;
use crate::model::{LcnnConfig, LcnnModel};
use crate::ndkernel::Optimizer;
use crate::prototypes::{aggregate_global, PrototypeSet};
use crate::rng;
use crate::transport::{ClientReport, Control, Envelope, Hub, Link, Message};

/// One client's round: an upload plus its report.
struct Reply {
    upload: Message,
    report: ClientReport,
    attempts: u32,
}

fn receive_reply(hub: &mut Hub, id: u32, round: u32) -> Result<(Message, ClientReport)> {
    let upload = hub.recv(id)?;
    if let Message::Error(msg) = upload.message {
        return Err(Error::Session(format!("client {id} failed: {msg}")));
    }
    let report = hub.recv(id)?;
    if upload.round != round || report.round != round {
        return Err(Error::Protocol(format!("client {id} answered for the wrong round")));
    }
    match report.message {
        Message::Control(Control::Report(r)) => Ok((upload.message, r)),
        Message::Error(msg) => Err(Error::Session(format!("client {id} failed: {msg}"))),
        other => Err(Error::Protocol(format!("client {id} sent {:?} instead of a report", other.msg_type()))),
    }
}

fn attempt(hub: &mut Hub, id: u32, round: u32, outgoing: &Message) -> Result<(Message, ClientReport)> {
    hub.send(id, &Envelope::new(round, id, outgoing.clone()))?;
    receive_reply(hub, id, round)
}

/// Sends `outgoing` to every client and gathers replies. In sequential mode
/// clients run one at a time; otherwise all are released before the first
/// reply is read. A failed client gets one retry, then is excluded.
fn exchange(
    hub: &mut Hub,
    round: u32,
    parallel: bool,
    outgoing: &Message,
) -> Result<(BTreeMap<u32, Reply>, Vec<u32>)> {
    let ids = hub.client_ids();
    let mut first: BTreeMap<u32, Result<(Message, ClientReport)>> = BTreeMap::new();
    if parallel {
        let mut sent = Vec::new();
        for &id in &ids {
            match hub.send(id, &Envelope::new(round, id, outgoing.clone())) {
                Ok(()) => sent.push(id),
                Err(e) => {
                    first.insert(id, Err(e));
                }
            }
        }
        for id in sent {
            first.insert(id, receive_reply(hub, id, round));
        }
    } else {
        for &id in &ids {
            first.insert(id, attempt(hub, id, round, outgoing));
        }
    }
    let mut replies = BTreeMap::new();
    let mut excluded = Vec::new();
    for (id, result) in first {
        let (result, attempts) = match result {
            Ok(r) => (Ok(r), 1),
            Err(e) => {
                log::warn!("round {round}: client {id} failed ({e}), retrying");
                (attempt(hub, id, round, outgoing), 2)
            }
        };
        match result {
            Ok((upload, report)) => {
                replies.insert(id, Reply { upload, report, attempts });
            }
            Err(e) => {
                log::warn!("round {round}: client {id} excluded after retry ({e})");
                excluded.push(id);
            }
        }
    }
    Ok((replies, excluded))
}

fn finish(hub: &mut Hub, round: u32) {
    for id in hub.client_ids() {
        if let Err(e) = hub.send(id, &Envelope::new(round, id, Message::Control(Control::Finish))) {
            log::warn!("client {id} gone before finish: {e}");
        }
    }
}

fn records(hub: &Hub, round: u32, replies: &BTreeMap<u32, Reply>) -> Result<Vec<ClientRoundRecord>> {
    replies
        .iter()
        .map(|(&id, r)| {
            let bytes = hub.meter().totals(round, id);
            ClientRoundRecord::new(id, r.report.clone(), bytes, r.attempts, DEFAULT_BETA)
        })
        .collect()
}

/// Prototype protocol: each round broadcasts the current global set (empty
/// in round 1), collects local prototype sets and aggregates them.
pub fn server_run(hub: &mut Hub, config: &RoundConfig) -> Result<TrainReport> {
    config.validate()?;
    let parallel = config.execution == crate::Execution::Parallel;
    let mut report = TrainReport { protocol: Protocol::Prototypes, rounds: Vec::new() };
    let mut global = PrototypeSet::new();
    for round in 1..=config.rounds {
        let (replies, excluded) = exchange(hub, round, parallel, &Message::GlobalBroadcast(global.clone()))?;
        let mut locals = Vec::with_capacity(replies.len());
        for (&id, r) in &replies {
            match &r.upload {
                Message::PrototypeUpload(set) => locals.push((id, set.clone())),
                other => {
                    return Err(Error::Protocol(format!("client {id} uploaded {:?}", other.msg_type())));
                }
            }
        }
        if !locals.is_empty() {
            global = aggregate_global(&locals, config.aggregation)?;
        }
        let recs = records(hub, round, &replies)?;
        report.rounds.push(RoundRecord::new(round, recs, excluded, Some(global.clone())));
    }
    finish(hub, config.rounds);
    Ok(report)
}

/// Dataset-size-weighted mean of flat parameter vectors, summed in client
/// id order.
pub fn fedavg_average(uploads: &[(u32, u64, Vec<f64>)]) -> Result<Vec<f64>> {
    let mut ordered: Vec<&(u32, u64, Vec<f64>)> = uploads.iter().collect();
    ordered.sort_by_key(|u| u.0);
    let Some(first) = ordered.first() else {
        return Err(Error::EmptyInput("no parameter uploads to average".into()));
    };
    let len = first.2.len();
    let total: u64 = ordered.iter().map(|u| u.1).sum();
    if total == 0 {
        return Err(Error::Config("parameter uploads carry zero samples".into()));
    }
    // offsets from the first upload, so identical uploads average exactly
    let base = &first.2;
    let mut acc = base.clone();
    for (id, n, params) in ordered {
        if params.len() != len {
            return Err(Error::Config(format!(
                "architecture mismatch: client {id} sent {} parameters, expected {len}",
                params.len()
            )));
        }
        let w = *n as f64 / total as f64;
        acc.iter_mut().zip(params.iter().zip(base)).for_each(|(a, (p, b))| *a += w * (p - b));
    }
    Ok(acc)
}

/// FedAvg baseline: broadcast global trainable parameters, let clients
/// train with the supervised loss, average the uploads. BN running
/// statistics stay on the clients.
pub fn fedavg_run(hub: &mut Hub, model: &LcnnConfig, config: &RoundConfig) -> Result<TrainReport> {
    config.validate()?;
    let parallel = config.execution == crate::Execution::Parallel;
    let mut global = LcnnModel::init(model.clone(), rng::derive_seed(config.seed, &[rng::TAG_INIT]))?;
    let mut report = TrainReport { protocol: Protocol::FedAvg, rounds: Vec::new() };
    for round in 1..=config.rounds {
        let outgoing = Message::ParamBroadcast { samples: 0, checkpoint: checkpoint::encode(global.params(), true) };
        let (replies, excluded) = exchange(hub, round, parallel, &outgoing)?;
        let mut uploads = Vec::with_capacity(replies.len());
        for (&id, r) in &replies {
            let Message::ParamUpload { samples, checkpoint: bytes } = &r.upload else {
                return Err(Error::Protocol(format!("client {id} uploaded {:?}", r.upload.msg_type())));
            };
            let mut scratch = global.clone();
            checkpoint::load_into(scratch.params_mut(), bytes)?;
            uploads.push((id, *samples, scratch.params().flatten_trainable()));
        }
        if !uploads.is_empty() {
            global.params_mut().load_trainable(&fedavg_average(&uploads)?)?;
        }
        let recs = records(hub, round, &replies)?;
        report.rounds.push(RoundRecord::new(round, recs, excluded, None));
    }
    finish(hub, config.rounds);
    Ok(report)
}

/// Runs one round's local work; returns the upload and the epoch losses.
fn client_round(state: &mut ClientState, round: u32, config: &RoundConfig, msg: Message) -> Result<(Message, Vec<f64>)> {
    if state.take_injected_failure(round) {
        return Err(Error::State("injected failure".into()));
    }
    match msg {
        Message::GlobalBroadcast(g) => {
            state.global = if g.is_empty() { None } else { Some(g) };
            let out = local_update(state, round, config)?;
            Ok((Message::PrototypeUpload(out.prototypes), out.epoch_losses))
        }
        Message::ParamBroadcast { checkpoint: bytes, .. } => {
            checkpoint::load_into(state.model.params_mut(), &bytes)?;
            state.optimizer = Optimizer::new(config.optimizer);
            state.global = None;
            let cfg = RoundConfig { second_term: SecondTerm::None, ..config.clone() };
            let out = local_update(state, round, &cfg)?;
            let upload = Message::ParamUpload {
                samples: state.data.train.len() as u64,
                checkpoint: checkpoint::encode(state.model.params(), true),
            };
            Ok((upload, out.epoch_losses))
        }
        other => Err(Error::Protocol(format!("unexpected {:?} from server", other.msg_type()))),
    }
}

/// Serves rounds until the server sends Finish. A failed round is reported
/// to the server as an Error frame; the session stays open for a retry.
pub fn client_run(link: &mut dyn Link, state: &mut ClientState, config: &RoundConfig) -> Result<()> {
    let id = state.client_id;
    loop {
        let env = link.recv_msg()?;
        let round = env.round;
        match env.message {
            Message::Control(Control::Finish) => return Ok(()),
            Message::Error(msg) => return Err(Error::Session(format!("server rejected client {id}: {msg}"))),
            msg => {
                let start = Instant::now();
                let outcome = client_round(state, round, config, msg).and_then(|(upload, losses)| {
                    let confusion = evaluate(&state.model, &state.data.test, config.eval_chunk, config.execution)?;
                    Ok((upload, losses, confusion))
                });
                match outcome {
                    Ok((upload, epoch_losses, confusion)) => {
                        let counts = state.data.train.counts();
                        let report = ClientReport {
                            epoch_losses,
                            confusion,
                            degenerate: !counts.has_both(),
                            train_samples: state.data.train.len() as u64,
                            wall_ms: start.elapsed().as_secs_f64() * 1e3,
                        };
                        link.send_msg(&Envelope::new(round, id, upload))?;
                        link.send_msg(&Envelope::new(round, id, Message::Control(Control::Report(report))))?;
                    }
                    Err(e) => {
                        log::warn!("client {id} round {round}: {e}");
                        link.send_msg(&Envelope::new(round, id, Message::Error(e.to_string())))?;
                    }
                }
            }
        }
    }
}
