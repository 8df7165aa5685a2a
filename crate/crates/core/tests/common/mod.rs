#![allow(dead_code)]

pub mod gradcheck;

use protofed::data::{generate_synthetic, ClientData, DatasetSpec};
use protofed::federation::{ClientState, RoundConfig};
use protofed::model::LcnnConfig;
use protofed::Execution;

pub fn tiny_model() -> LcnnConfig {
    LcnnConfig {
        input_dim: 4,
        window: 8,
        lstm_hidden: 4,
        conv_channels: [4, 4, 4],
        kernel_size: 3,
        se_reduction: 4,
        ..LcnnConfig::default()
    }
}

pub fn tiny_spec(clients: usize, seed: u64) -> DatasetSpec {
    let mut spec = DatasetSpec {
        channels: 4,
        window: 8,
        train_ratio: 5,
        test_ratio: 5,
        train_windows: 120,
        clients,
        seed,
        ..DatasetSpec::default()
    };
    spec.signal.signature_channels = 2;
    spec
}

pub fn tiny_round(rounds: u32, clients: usize) -> RoundConfig {
    RoundConfig { rounds, epochs: 2, clients, batch_size: 32, seed: 11, ..RoundConfig::default() }
}

pub fn tiny_data(clients: usize, seed: u64) -> Vec<ClientData> {
    generate_synthetic(&tiny_spec(clients, seed), Execution::Sequential).unwrap()
}

pub fn tiny_clients(data: Vec<ClientData>, config: &RoundConfig) -> Vec<ClientState> {
    data.into_iter().map(|d| ClientState::new(d, &tiny_model(), config).unwrap()).collect()
}
