//! Round orchestration: client-side local updates, the prototype server
//! loop, and the parameter-averaging baseline.

mod local;
mod report;
mod server;
mod sim;

pub use local::{
    batch_backward, batch_loss, epoch_batches, evaluate, local_update, predict, BatchLoss, ClientState, LocalOutcome,
    Objective,
};
pub use report::{ClientRoundRecord, Protocol, RoundRecord, Summary, TrainReport};
pub use server::{client_run, fedavg_average, fedavg_run, server_run};
pub use sim::{simulate, Carrier, Simulation};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, SecondTerm};
use crate::ndkernel::OptimizerConfig;
use crate::prototypes::AggregationMode;
use crate::Execution;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub rounds: u32,
    pub epochs: u32,
    pub clients: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub second_term: SecondTerm,
    pub aggregation: AggregationMode,
    pub seed: u64,
    pub execution: Execution,
    /// Windows per forward pass during evaluation.
    pub eval_chunk: usize,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            rounds: 20,
            epochs: 100,
            clients: 4,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            second_term: SecondTerm::Contrastive,
            aggregation: AggregationMode::Normalized,
            seed: 0,
            execution: Execution::Sequential,
            eval_chunk: 512,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("local epochs must be at least 1".into()));
        }
        if self.clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.optimizer.lr.is_nan() || self.optimizer.lr < 0.0 {
            return Err(Error::Config(format!("learning rate {} must be nonnegative", self.optimizer.lr)));
        }
        self.loss.validate()
    }
}
