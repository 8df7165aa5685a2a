//! Dense f64 tensors and the handful of differentiable layers the LCNN
//! needs. Each layer is a forward function returning a cache plus a
//! backward function returning explicit gradients; composition happens in
//! [`crate::model`].

mod activation;
mod conv;
mod gemm;
mod linear;
mod lstm;
mod norm;
mod optim;
mod params;
mod pool;
mod tensor;

pub use activation::{
    dropout, dropout_backward, relu, sigmoid, sigmoid_backward, sigmoid_scalar, silu, Activation,
};
pub use conv::{conv1d, conv1d_backward, conv1d_output_len, Conv1dCache, Conv1dGrads};
pub use linear::{linear, linear_backward, LinearGrads};
pub use lstm::{lstm_backward, lstm_forward, LstmCache, LstmGrads};
pub use norm::{batchnorm, batchnorm_backward, BatchNormCache, BatchNormGrads, BN_EPS, BN_MOMENTUM};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{Param, ParamId, ParamStore};
pub use pool::{
    adaptive_avg_pool, adaptive_avg_pool_backward, se_block, se_block_backward, se_hidden, SeCache,
    SeGrads, SeWeights,
};
pub use tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
