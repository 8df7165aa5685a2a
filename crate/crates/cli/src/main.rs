//! Command-line runner for federated prototype experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use protofed::data::{write_csv, CsvSchema};
use protofed::experiment::{
    metrics_csv, run, run_ablations, run_sweep, trajectory_csv, ExperimentConfig, Mode, Preset, SweepAxis,
};
use protofed::federation::{client_run, fedavg_run, server_run, ClientState, Protocol};
use protofed::losses::SecondTerm;
use protofed::ndkernel::{Activation, OptimizerKind};
use protofed::prototypes::AggregationMode;
use protofed::transport::{Hub, Link, TcpLink, TcpServer};
use protofed::Execution;

#[derive(Parser, Debug)]
#[command(name = "protofed", version, about = "Federated prototype learning experiments")]
#[command(args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    run: ConfigArgs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment (the default when no subcommand is given).
    Run(ConfigArgs),
    /// One sub-run per value of an axis, plus `sweep_summary.csv`.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values; defaults to the axis grid.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Server side of a multi-process run over TCP.
    Serve {
        #[arg(long, default_value = "0.0.0.0")]
        host: String,
        #[arg(long, env = "PROTOFED_PORT", default_value_t = 7878)]
        port: u16,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Client side of a multi-process run over TCP.
    Client {
        #[arg(long)]
        id: u32,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "PROTOFED_PORT", default_value_t = 7878)]
        port: u16,
        /// Seconds to keep retrying the connection.
        #[arg(long, default_value_t = 30)]
        wait: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Writes each client's synthetic windows to `client_<i>.csv`.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args, Debug, Default, Clone)]
struct ConfigArgs {
    /// TOML file merged over the preset defaults; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    preset: Option<Preset>,
    /// Train imbalance ratio, non-icing windows per icing window.
    #[arg(long)]
    rho: Option<u32>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    second_term: Option<SecondTerm>,
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    aggregation: Option<AggregationMode>,
    #[arg(long)]
    execution: Option<Execution>,
    /// `inproc`, `tcp` or `tcp:host:port`. Bare `tcp` listens on
    /// PROTOFED_PORT when set.
    #[arg(long)]
    transport: Option<String>,
    /// One CSV per client; replaces synthetic data.
    #[arg(long = "csv", value_delimiter = ',')]
    csv_files: Vec<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let file: Option<toml::Value> = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Some(toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
            }
            None => None,
        };
        let file_preset = file
            .as_ref()
            .and_then(|v| v.get("preset"))
            .and_then(|v| v.as_str())
            .map(str::parse::<Preset>)
            .transpose()?;
        let preset = self.preset.or(file_preset).unwrap_or_default();
        let mut c = ExperimentConfig::preset(preset);
        if let Some(file) = file {
            let mut merged = toml::Value::try_from(&c).context("serializing preset")?;
            merge(&mut merged, file);
            c = merged.try_into().context("invalid config file")?;
            c.preset = preset;
        }

        if let Some(v) = self.mode {
            c.mode = v;
        }
        if let Some(v) = self.rho {
            c.data.train_ratio = v;
        }
        if let Some(v) = self.rounds {
            c.rounds.rounds = v;
        }
        if let Some(v) = self.epochs {
            c.rounds.epochs = v;
        }
        if let Some(v) = self.clients {
            c.set_clients(v);
        }
        if let Some(v) = self.window {
            c.set_window(v);
        }
        if let Some(v) = self.seed {
            c.set_seed(v);
        }
        if let Some(v) = self.lambda {
            c.rounds.loss.lambda = v;
        }
        if let Some(v) = self.second_term {
            c.rounds.second_term = v;
        }
        if let Some(v) = self.activation {
            c.model.activation = v;
        }
        if let Some(v) = self.optimizer {
            c.rounds.optimizer.kind = v;
        }
        if let Some(v) = self.aggregation {
            c.rounds.aggregation = v;
        }
        if let Some(v) = self.execution {
            c.rounds.execution = v;
        }
        if let Some(v) = &self.transport {
            c.transport = match (v.as_str(), std::env::var("PROTOFED_PORT")) {
                ("tcp", Ok(port)) => format!("tcp:127.0.0.1:{port}"),
                _ => v.clone(),
            };
        }
        if !self.csv_files.is_empty() {
            c.csv_files = self.csv_files.clone();
            c.set_clients(self.csv_files.len());
        }
        if let Some(v) = &self.output {
            c.output = v.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn protocol(config: &ExperimentConfig) -> Protocol {
    match config.mode {
        Mode::Fedavg => Protocol::FedAvg,
        _ => Protocol::Prototypes,
    }
}

fn cmd_run(args: &ConfigArgs) -> Result<()> {
    let config = args.resolve()?;
    if config.mode == Mode::Ablation {
        let rows = run_ablations(&config)?;
        for r in &rows {
            println!("{:<16} {:<6} mFb {} mBA {}", r.value, r.status, metric(r.m_fbeta), metric(r.m_ba));
        }
        if rows.iter().any(|r| r.status != "ok") {
            bail!("some ablation variants failed; see {}", config.output.join("ablation_summary.csv").display());
        }
        return Ok(());
    }
    let out = run(&config)?;
    println!("{}", serde_json::to_string_pretty(&out.summary)?);
    Ok(())
}

fn cmd_sweep(axis: SweepAxis, values: &[f64], args: &ConfigArgs) -> Result<()> {
    let config = args.resolve()?;
    let values = if values.is_empty() { axis.default_values() } else { values.to_vec() };
    let rows = run_sweep(&config, axis, &values)?;
    for r in &rows {
        println!("{}={:<8} {:<6} mFb {} mBA {}", r.axis, r.value, r.status, metric(r.m_fbeta), metric(r.m_ba));
    }
    if rows.iter().any(|r| r.status != "ok") {
        bail!("some sweep values failed; see {}", config.output.join("sweep_summary.csv").display());
    }
    Ok(())
}

fn write_server_artifacts(dir: &Path, config: &ExperimentConfig, report: &protofed::federation::TrainReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    fs::write(dir.join("metrics.csv"), metrics_csv(report))?;
    fs::write(dir.join("trajectory.csv"), trajectory_csv(report))?;
    fs::write(dir.join("report.json"), report.to_json()? + "\n")?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&report.summary())? + "\n")?;
    Ok(())
}

fn cmd_serve(host: &str, port: u16, args: &ConfigArgs) -> Result<()> {
    let config = args.resolve()?;
    let server = TcpServer::bind((host, port))?;
    log::info!("listening on {}", server.local_addr()?);
    let ids: Vec<u32> = (0..config.rounds.clients as u32).collect();
    let links = server.accept_clients(&ids)?;
    let mut hub = Hub::new(links.into_iter().map(|(id, l)| (id, Box::new(l) as Box<dyn Link>)).collect())?;
    let report = match protocol(&config) {
        Protocol::Prototypes => server_run(&mut hub, &config.rounds)?,
        Protocol::FedAvg => fedavg_run(&mut hub, &config.model, &config.rounds)?,
    };
    write_server_artifacts(&config.output, &config, &report)?;
    println!("{}", serde_json::to_string_pretty(&report.summary())?);
    Ok(())
}

fn cmd_client(id: u32, host: &str, port: u16, wait: u64, args: &ConfigArgs) -> Result<()> {
    let config = args.resolve()?;
    let data = config.load_client(id as usize)?;
    let mut state = ClientState::new(data, &config.model, &config.rounds)?;
    let mut link = TcpLink::connect((host, port), id, Duration::from_secs(wait))?;
    client_run(&mut link, &mut state, &config.rounds)?;
    log::info!("client {id} finished");
    Ok(())
}

fn cmd_gen_data(args: &ConfigArgs) -> Result<()> {
    let config = args.resolve()?;
    if !config.csv_files.is_empty() {
        bail!("gen-data writes synthetic data; drop --csv");
    }
    fs::create_dir_all(&config.output)?;
    let schema = CsvSchema::with_channels(config.data.channels);
    for client in config.load_data()? {
        let mut all = client.train.clone();
        for s in client.test.samples() {
            all.push(s)?;
        }
        let path = config.output.join(format!("client_{}.csv", client.client_id));
        write_csv(&path, &all, &schema)?;
        println!("{} ({} windows)", path.display(), all.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        None => cmd_run(&cli.run),
        Some(Command::Run(args)) => cmd_run(&args),
        Some(Command::Sweep { axis, values, config }) => cmd_sweep(axis, &values, &config),
        Some(Command::Serve { host, port, config }) => cmd_serve(&host, port, &config),
        Some(Command::Client { id, host, port, wait, config }) => cmd_client(id, &host, port, wait, &config),
        Some(Command::GenData { config }) => cmd_gen_data(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
