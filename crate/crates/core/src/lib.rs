//! Federated prototype learning for class-imbalanced, heterogeneous
//! time-series clients.
//!
//! Clients train a small LSTM/CNN classifier locally and exchange only
//! per-class embedding means (prototypes) with a server, which aggregates
//! them into global targets. Local training combines a count-weighted
//! supervised loss with a weighted prototype contrastive loss.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ndkernel;
pub mod prototypes;
pub mod rng;
pub mod transport;

pub use error::{Error, Result};
pub use exec::Execution;
