//! Experiment runner: resolved configuration, presets, single runs,
//! ablation suites, parameter sweeps, and the artifacts each one writes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{generate_client, generate_synthetic, load_csv, ClientData, CsvLoadOptions, CsvSchema, DatasetManifest, DatasetSpec};
use crate::error::{Error, Result};
use crate::federation::{simulate, Carrier, ClientState, Protocol, RoundConfig, Summary, TrainReport};
use crate::losses::SecondTerm;
use crate::model::{LcnnConfig, LcnnModel};
use crate::ndkernel::{Activation, OptimizerKind};
use crate::transport::{prototype_payload_len, HEADER_LEN};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Fedhpb,
    Fedavg,
    /// FedHPb plus one run per ablation variant.
    Ablation,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedhpb" => Ok(Mode::Fedhpb),
            "fedavg" => Ok(Mode::Fedavg),
            "ablation" | "ablations" => Ok(Mode::Ablation),
            other => Err(Error::Config(format!("unknown mode `{other}` (fedhpb | fedavg | ablation)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small enough for a laptop: 4 clients, 5 rounds of 10 epochs, and a
    /// compact model.
    #[default]
    Desk,
    /// 20 clients, 20 rounds of 100 epochs, full-size model.
    Full,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config(format!("unknown preset `{other}` (desk | full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub preset: Preset,
    pub data: DatasetSpec,
    pub model: LcnnConfig,
    pub rounds: RoundConfig,
    /// `inproc` or `tcp:host:port`.
    pub transport: String,
    /// One CSV log per client; empty means synthetic data.
    pub csv_files: Vec<PathBuf>,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::preset(Preset::Desk)
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let (data, model, rounds) = match preset {
            Preset::Desk => (
                DatasetSpec::default(),
                LcnnConfig { lstm_hidden: 8, conv_channels: [8, 8, 8], ..LcnnConfig::default() },
                RoundConfig { rounds: 5, epochs: 10, clients: 4, ..RoundConfig::default() },
            ),
            Preset::Full => (
                DatasetSpec { clients: 20, ..DatasetSpec::default() },
                LcnnConfig::default(),
                RoundConfig { rounds: 20, epochs: 100, clients: 20, ..RoundConfig::default() },
            ),
        };
        ExperimentConfig {
            mode: Mode::Fedhpb,
            preset,
            data,
            model,
            rounds,
            transport: "inproc".into(),
            csv_files: Vec::new(),
            output: PathBuf::from("runs/latest"),
        }
    }

    /// Seeds both data generation and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.rounds.seed = seed;
    }

    pub fn set_window(&mut self, window: usize) {
        self.data.window = window;
        self.model.window = window;
    }

    pub fn set_clients(&mut self, clients: usize) {
        self.data.clients = clients;
        self.rounds.clients = clients;
    }

    pub fn carrier(&self) -> Result<Carrier> {
        self.transport.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.rounds.validate()?;
        self.carrier()?;
        if self.model.window != self.data.window || self.model.input_dim != self.data.channels {
            return Err(Error::Config(format!(
                "model expects [{}, {}] windows, data has [{}, {}]",
                self.model.window, self.model.input_dim, self.data.window, self.data.channels
            )));
        }
        if self.csv_files.is_empty() {
            self.data.validate()?;
            if self.rounds.clients != self.data.clients {
                return Err(Error::Config(format!(
                    "{} clients in the round config, {} in the data spec",
                    self.rounds.clients, self.data.clients
                )));
            }
        } else if self.rounds.clients != self.csv_files.len() {
            return Err(Error::Config(format!(
                "{} clients configured but {} CSV files given",
                self.rounds.clients,
                self.csv_files.len()
            )));
        }
        Ok(())
    }

    /// One client's data, identical to its entry in `load_data`.
    pub fn load_client(&self, client: usize) -> Result<ClientData> {
        if self.csv_files.is_empty() {
            if client >= self.data.clients {
                return Err(Error::Config(format!("client {client} out of range for {} clients", self.data.clients)));
            }
            return generate_client(&self.data, client);
        }
        let path = self
            .csv_files
            .get(client)
            .ok_or_else(|| Error::Config(format!("no CSV file for client {client}")))?;
        let opts = CsvLoadOptions {
            train_fraction: self.data.train_fraction,
            seed: self.data.seed,
            client_id: client as u32,
            ..CsvLoadOptions::new(self.data.window)
        };
        load_csv(path, &CsvSchema::with_channels(self.data.channels), &opts)
    }

    pub fn load_data(&self) -> Result<Vec<ClientData>> {
        if self.csv_files.is_empty() {
            return generate_synthetic(&self.data, self.rounds.execution);
        }
        (0..self.csv_files.len()).map(|i| self.load_client(i)).collect()
    }
}

/// Wire bytes of one client upload per round for each protocol.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UploadSizes {
    pub prototypes: u64,
    pub fedavg: u64,
}

/// Upload sizes from the layouts: a two-class prototype frame, and a frame
/// with a sample count plus a trainable-parameter checkpoint.
pub fn upload_sizes(model: &LcnnConfig) -> Result<UploadSizes> {
    let m = LcnnModel::init(model.clone(), 0)?;
    let ckpt = checkpoint::encode(m.params(), true).len();
    Ok(UploadSizes {
        prototypes: (HEADER_LEN + prototype_payload_len(model.num_classes, model.embed_dim())) as u64,
        fedavg: (HEADER_LEN + 8 + ckpt) as u64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub protocol: Protocol,
    pub second_term: SecondTerm,
    pub seed: u64,
    #[serde(flatten)]
    pub summary: Summary,
    pub expected_upload: UploadSizes,
    pub wall_seconds: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    protocol: Protocol,
    parameter_count: usize,
    dataset: Option<DatasetManifest>,
    clients: Vec<(u32, u64, u64)>,
}

pub struct RunOutcome {
    pub report: TrainReport,
    pub summary: RunSummary,
    pub dir: PathBuf,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// `round,client,tp,tn,fp,fn,precision,recall,fbeta,ba`, then one macro
/// row per round with client `mean`.
pub fn metrics_csv(report: &TrainReport) -> String {
    let mut s = String::from("round,client,tp,tn,fp,fn,precision,recall,fbeta,ba\n");
    for r in &report.rounds {
        for c in &r.clients {
            let k = &c.confusion;
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.round, c.client_id, k.tp, k.tn, k.fp, k.fn_, c.precision, c.recall, c.fbeta, c.ba
            )
            .expect("string write");
        }
        writeln!(s, "{},mean,,,,,,,{},{}", r.round, r.m_fbeta, r.m_ba).expect("string write");
    }
    s
}

/// Per (round, epoch): client-mean training loss, plus the round's macro
/// metrics and mean upload bytes.
pub fn trajectory_csv(report: &TrainReport) -> String {
    let mut s = String::from("round,epoch,step,mean_loss,m_fbeta,m_ba,mean_upload_bytes\n");
    let mut step = 0;
    for r in &report.rounds {
        let epochs = r.clients.iter().map(|c| c.epoch_losses.len()).max().unwrap_or(0);
        let k = r.clients.len().max(1) as f64;
        let upload = r.clients.iter().map(|c| c.bytes.upload as f64).sum::<f64>() / k;
        for e in 0..epochs {
            step += 1;
            let loss = r.clients.iter().filter_map(|c| c.epoch_losses.get(e)).sum::<f64>() / k;
            writeln!(s, "{},{},{},{},{},{},{}", r.round, e + 1, step, loss, r.m_fbeta, r.m_ba, upload)
                .expect("string write");
        }
    }
    s
}

/// Runs one federation with `protocol` and writes manifest.json,
/// metrics.csv, trajectory.csv, report.json and summary.json to `dir`.
/// The manifest is written first, so a failed run leaves it behind.
pub fn run_protocol(config: &ExperimentConfig, protocol: Protocol, dir: &Path) -> Result<RunOutcome> {
    config.validate()?;
    fs::create_dir_all(dir)?;
    let data = config.load_data()?;
    let manifest = Manifest {
        tool: "protofed",
        version: env!("CARGO_PKG_VERSION"),
        config,
        protocol,
        parameter_count: config.model.param_count(),
        dataset: config.csv_files.is_empty().then(|| DatasetManifest::describe(&config.data, &data)),
        clients: data.iter().map(|c| (c.client_id, c.train.len() as u64, c.test.len() as u64)).collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;

    let start = Instant::now();
    let states = data
        .into_iter()
        .map(|d| ClientState::new(d, &config.model, &config.rounds))
        .collect::<Result<Vec<_>>>()?;
    let sim = simulate(states, &config.model, &config.rounds, &config.carrier()?, protocol)?;
    let wall_seconds = start.elapsed().as_secs_f64();

    let report = sim.report;
    fs::write(dir.join("metrics.csv"), metrics_csv(&report))?;
    fs::write(dir.join("trajectory.csv"), trajectory_csv(&report))?;
    write_json(&dir.join("report.json"), &report)?;
    let summary = RunSummary {
        mode: config.mode,
        protocol,
        second_term: if protocol == Protocol::FedAvg { SecondTerm::None } else { config.rounds.second_term },
        seed: config.rounds.seed,
        summary: report.summary(),
        expected_upload: upload_sizes(&config.model)?,
        wall_seconds,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    log::info!(
        "{:?} run in {}: mFb {:?} mBA {:?} ({wall_seconds:.1}s)",
        protocol,
        dir.display(),
        summary.summary.m_fbeta,
        summary.summary.m_ba
    );
    Ok(RunOutcome { report, summary, dir: dir.to_path_buf() })
}

/// Runs a fedhpb or fedavg experiment into `config.output`.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome> {
    let protocol = match config.mode {
        Mode::Fedhpb => Protocol::Prototypes,
        Mode::Fedavg => Protocol::FedAvg,
        Mode::Ablation => return Err(Error::Config("ablation mode runs through run_ablations".into())),
    };
    run_protocol(config, protocol, &config.output)
}

/// Named variants of a base configuration.
pub fn ablation_variants(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut out = vec![("fedhpb".to_string(), base.clone())];
    let mut v = base.clone();
    v.rounds.second_term = SecondTerm::None;
    out.push(("no_second_term".into(), v));
    let mut v = base.clone();
    v.rounds.second_term = SecondTerm::L2;
    out.push(("l2".into(), v));
    let mut v = base.clone();
    v.model.activation = Activation::Silu;
    out.push(("silu".into(), v));
    let mut v = base.clone();
    v.rounds.optimizer.kind = OptimizerKind::Adam;
    out.push(("adam".into(), v));
    out
}

/// One row of a combined table, for sweeps and ablation suites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub axis: String,
    pub value: String,
    pub status: String,
    pub m_fbeta: Option<f64>,
    pub m_ba: Option<f64>,
    pub final_m_fbeta: Option<f64>,
    pub final_m_ba: Option<f64>,
    pub mean_upload_bytes: Option<f64>,
    pub dir: String,
    pub error: String,
}

impl TableRow {
    fn from_result(axis: &str, value: String, dir: &Path, result: Result<RunOutcome>) -> Self {
        let mut row = TableRow {
            axis: axis.into(),
            value,
            status: "ok".into(),
            m_fbeta: None,
            m_ba: None,
            final_m_fbeta: None,
            final_m_ba: None,
            mean_upload_bytes: None,
            dir: dir.display().to_string(),
            error: String::new(),
        };
        match result {
            Ok(o) => {
                let s = &o.summary.summary;
                row.m_fbeta = s.m_fbeta;
                row.m_ba = s.m_ba;
                row.final_m_fbeta = s.final_m_fbeta;
                row.final_m_ba = s.final_m_ba;
                row.mean_upload_bytes = Some(s.mean_upload_bytes);
            }
            Err(e) => {
                log::warn!("{axis}={}: {e}", row.value);
                row.status = "failed".into();
                row.error = e.to_string();
            }
        }
        row
    }
}

pub fn write_table(path: &Path, rows: &[TableRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every ablation variant under `config.output/<variant>` and writes
/// `ablation_summary.csv`.
pub fn run_ablations(config: &ExperimentConfig) -> Result<Vec<TableRow>> {
    config.validate()?;
    fs::create_dir_all(&config.output)?;
    let rows: Vec<TableRow> = ablation_variants(config)
        .into_iter()
        .map(|(name, cfg)| {
            let dir = config.output.join(&name);
            let result = run_protocol(&cfg, Protocol::Prototypes, &dir);
            TableRow::from_result("variant", name, &dir, result)
        })
        .collect();
    write_table(&config.output.join("ablation_summary.csv"), &rows)?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Window,
    Rho,
    Lambda,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "window" => Ok(SweepAxis::Window),
            "rho" => Ok(SweepAxis::Rho),
            "lambda" => Ok(SweepAxis::Lambda),
            other => Err(Error::Config(format!("unknown sweep axis `{other}` (window | rho | lambda)"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Window => "window",
            SweepAxis::Rho => "rho",
            SweepAxis::Lambda => "lambda",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::Window => vec![32.0, 64.0, 128.0, 256.0],
            SweepAxis::Rho => vec![20.0, 50.0, 100.0],
            SweepAxis::Lambda => vec![0.0, 0.1, 0.25, 0.5, 0.75],
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = base.clone();
        let whole = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("{} must be a positive integer, got {value}", self.name())))
            }
        };
        match self {
            SweepAxis::Window => c.set_window(whole()?),
            SweepAxis::Rho => c.data.train_ratio = whole()? as u32,
            SweepAxis::Lambda => c.rounds.loss.lambda = value,
        }
        c.validate()?;
        Ok(c)
    }
}

/// One sub-run per value under `config.output/<axis>_<value>`; failures are
/// recorded and the sweep continues. Writes `sweep_summary.csv`.
pub fn run_sweep(config: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<TableRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let protocol = if config.mode == Mode::Fedavg { Protocol::FedAvg } else { Protocol::Prototypes };
    fs::create_dir_all(&config.output)?;
    let rows: Vec<TableRow> = values
        .iter()
        .map(|&v| {
            let label = format!("{v}");
            let dir = config.output.join(format!("{}_{label}", axis.name()));
            let result = axis.apply(config, v).and_then(|c| run_protocol(&c, protocol, &dir));
            TableRow::from_result(axis.name(), label, &dir, result)
        })
        .collect();
    write_table(&config.output.join("sweep_summary.csv"), &rows)?;
    Ok(rows)
}
