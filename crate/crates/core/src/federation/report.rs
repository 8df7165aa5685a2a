//! Training report: one record per (round, client) plus per-round global
//! state, serializable as JSON.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{self, ClientScore, ConfusionCounts};
use crate::prototypes::PrototypeSet;
use crate::transport::{ByteTotals, ClientReport};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Prototype exchange.
    #[default]
    Prototypes,
    /// Parameter averaging baseline.
    FedAvg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundRecord {
    pub client_id: u32,
    pub epoch_losses: Vec<f64>,
    pub confusion: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub fbeta: f64,
    pub ba: f64,
    /// The client lacks a class; its regularizer was off.
    pub degenerate: bool,
    pub train_samples: u64,
    pub bytes: ByteTotals,
    pub wall_ms: f64,
    /// 1, or 2 after a retry.
    pub attempts: u32,
}

impl ClientRoundRecord {
    pub fn new(client_id: u32, report: ClientReport, bytes: ByteTotals, attempts: u32, beta: f64) -> Result<Self> {
        let s = ClientScore::from_confusion(report.confusion, beta)?;
        Ok(ClientRoundRecord {
            client_id,
            epoch_losses: report.epoch_losses,
            confusion: s.confusion,
            precision: s.precision,
            recall: s.recall,
            fbeta: s.fbeta,
            ba: s.ba,
            degenerate: report.degenerate,
            train_samples: report.train_samples,
            bytes,
            wall_ms: report.wall_ms,
            attempts,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub clients: Vec<ClientRoundRecord>,
    /// Clients that failed twice and were left out of aggregation.
    pub excluded: Vec<u32>,
    /// Aggregated prototypes after this round (prototype protocol only).
    pub global: Option<PrototypeSet>,
    /// Macro means over participating clients.
    pub m_fbeta: f64,
    pub m_ba: f64,
}

impl RoundRecord {
    pub fn new(round: u32, clients: Vec<ClientRoundRecord>, excluded: Vec<u32>, global: Option<PrototypeSet>) -> Self {
        let pairs: Vec<(f64, f64)> = clients.iter().map(|c| (c.fbeta, c.ba)).collect();
        let (m_fbeta, m_ba) = metrics::macro_means(&pairs).unwrap_or((0.0, 0.0));
        RoundRecord { round, clients, excluded, global, m_fbeta, m_ba }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: u32,
    /// Macro means averaged over all rounds.
    pub m_fbeta: Option<f64>,
    pub m_ba: Option<f64>,
    /// Macro means of the last round.
    pub final_m_fbeta: Option<f64>,
    pub final_m_ba: Option<f64>,
    /// Mean data-frame bytes per (round, client).
    pub mean_upload_bytes: f64,
    pub mean_download_bytes: f64,
    pub degenerate_clients: Vec<u32>,
    pub excluded: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub protocol: Protocol,
    pub rounds: Vec<RoundRecord>,
}

impl TrainReport {
    pub fn summary(&self) -> Summary {
        let per_round: Vec<(f64, f64)> = self.rounds.iter().map(|r| (r.m_fbeta, r.m_ba)).collect();
        let avg = metrics::round_averaged(&per_round).ok();
        let last = self.rounds.last();
        let records: Vec<&ClientRoundRecord> = self.rounds.iter().flat_map(|r| &r.clients).collect();
        let n = records.len().max(1) as f64;
        let mut degenerate: Vec<u32> = records.iter().filter(|c| c.degenerate).map(|c| c.client_id).collect();
        degenerate.sort_unstable();
        degenerate.dedup();
        Summary {
            rounds: self.rounds.len() as u32,
            m_fbeta: avg.map(|a| a.0),
            m_ba: avg.map(|a| a.1),
            final_m_fbeta: last.map(|r| r.m_fbeta),
            final_m_ba: last.map(|r| r.m_ba),
            mean_upload_bytes: records.iter().map(|c| c.bytes.upload as f64).sum::<f64>() / n,
            mean_download_bytes: records.iter().map(|c| c.bytes.download as f64).sum::<f64>() / n,
            degenerate_clients: degenerate,
            excluded: self.rounds.iter().flat_map(|r| r.excluded.iter().map(move |c| (r.round, *c))).collect(),
        }
    }

    /// Copy with wall times and control-frame byte counts zeroed, for
    /// comparing runs across carriers or machines.
    pub fn without_volatile(&self) -> TrainReport {
        let mut r = self.clone();
        for c in r.rounds.iter_mut().flat_map(|r| r.clients.iter_mut()) {
            c.wall_ms = 0.0;
            c.bytes.control_upload = 0;
            c.bytes.control_download = 0;
        }
        r
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
