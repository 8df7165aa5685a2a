use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd, lr: 0.01, momentum: 0.9, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer with per-parameter state. State vectors are allocated lazily
/// on the first step and must keep matching the parameter shapes.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer { config, first: Vec::new(), second: Vec::new(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn ensure_state(&mut self, store: &ParamStore) -> Result<()> {
        if self.first.is_empty() {
            self.first = store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != store.len()
            || self.first.iter().zip(store.params()).any(|(s, p)| s.len() != p.value.len())
        {
            return Err(Error::State("optimizer state does not match parameter shapes".into()));
        }
        Ok(())
    }

    /// Applies one update to every trainable parameter and zeroes gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.params().iter().find(|p| p.trainable && !p.value.has_grad()) {
            return Err(Error::State(format!("parameter `{}` has no gradient", p.name)));
        }
        self.ensure_state(store)?;
        self.steps += 1;
        match self.config.kind {
            OptimizerKind::Sgd => sgd_step(store, &mut self.first, self.config.lr, self.config.momentum),
            OptimizerKind::Adam => {
                let c = self.config;
                adam_step(store, &mut self.first, &mut self.second, self.steps, c.lr, c.beta1, c.beta2, c.eps)
            }
        }
        store.zero_grads();
        Ok(())
    }
}

fn sgd_step(store: &mut ParamStore, velocity: &mut [Vec<f64>], lr: f64, momentum: f64) {
    for (p, v) in store.params_mut().iter_mut().zip(velocity) {
        if !p.trainable {
            continue;
        }
        let g = p.value.grad().expect("checked").to_vec();
        for ((w, vi), gi) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
            if momentum != 0.0 {
                *vi = momentum * *vi + gi;
                *w -= lr * *vi;
            } else {
                *w -= lr * gi;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_step(
    store: &mut ParamStore,
    m: &mut [Vec<f64>],
    v: &mut [Vec<f64>],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for ((p, mi), vi) in store.params_mut().iter_mut().zip(m).zip(v) {
        if !p.trainable {
            continue;
        }
        let g = p.value.grad().expect("checked").to_vec();
        for (((w, a), b), gi) in p.value.data_mut().iter_mut().zip(mi.iter_mut()).zip(vi.iter_mut()).zip(&g) {
            *a = beta1 * *a + (1.0 - beta1) * gi;
            *b = beta2 * *b + (1.0 - beta2) * gi * gi;
            let mhat = *a / bc1;
            let vhat = *b / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}
