//! Client-side training: the combined loss on one mini-batch, the E-epoch
//! local update, and held-out evaluation.

use rand::seq::SliceRandom;

use super::RoundConfig;
use crate::data::{ClientData, Dataset};
use crate::error::{Error, Result};
use crate::losses::{self, ClassCounts, LossConfig, SecondTerm};
use crate::metrics::ConfusionCounts;
use crate::model::{ForwardPass, LcnnConfig, LcnnModel};
use crate::ndkernel::{Optimizer, Tensor};
use crate::prototypes::{PrototypeSet, RunningMean};
use crate::rng::{self, Rng};
use crate::Execution;

/// Loss values of one mini-batch. `second` is `None` when the regularizer
/// did not apply to this batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub supervised: f64,
    pub second: Option<f64>,
}

/// The regularizer over the batch prototypes and its gradient wrt each
/// embedding row.
fn second_term(
    embeddings: &Tensor,
    labels: &[u8],
    target: &PrototypeSet,
    term: SecondTerm,
    counts: &ClassCounts,
    loss: &LossConfig,
) -> Result<Option<(f64, Tensor)>> {
    let (n, m) = (embeddings.dim(0), embeddings.dim(1));
    let batch = crate::prototypes::compute_local_prototypes(embeddings, labels)?;
    // gradient wrt each class prototype, spread evenly over its rows
    let mut per_class: Vec<(u16, Vec<f64>)> = Vec::new();
    let value = match term {
        SecondTerm::None => return Ok(None),
        SecondTerm::Contrastive => {
            let (Some(c0), Some(c1), Some(g0), Some(g1)) =
                (batch.vector(0), batch.vector(1), target.vector(0), target.vector(1))
            else {
                return Ok(None);
            };
            let (v, d0, d1) = losses::contrastive_loss_vectors((c0, c1), (g0, g1), counts, loss)?;
            per_class.push((0, d0));
            per_class.push((1, d1));
            v
        }
        SecondTerm::L2 => {
            let mut total = 0.0;
            for (class, proto) in batch.iter() {
                if let Some(g) = target.vector(class) {
                    let (d, grad) = losses::l2_distance_with_grad(&proto.vector, g)?;
                    total += d;
                    per_class.push((class, grad));
                }
            }
            if per_class.is_empty() {
                return Ok(None);
            }
            total
        }
    };
    let mut d = vec![0.0; n * m];
    for (class, grad) in &per_class {
        let scale = 1.0 / batch.count(*class) as f64;
        for (row, &y) in d.chunks_exact_mut(m).zip(labels) {
            if y as u16 == *class {
                row.iter_mut().zip(grad).for_each(|(r, g)| *r = g * scale);
            }
        }
    }
    Ok(Some((value, Tensor::new(&[n, m], d)?)))
}

/// What a client minimizes on each batch. `target` is the global prototype
/// set the regularizer pulls towards; `None` reduces the objective to the
/// supervised loss.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub counts: ClassCounts,
    pub target: Option<&'a PrototypeSet>,
    pub term: SecondTerm,
    pub loss: LossConfig,
}

impl Objective<'_> {
    fn evaluate(&self, pass: &ForwardPass, labels: &[u8]) -> Result<(BatchLoss, Tensor, Option<Tensor>)> {
        let (counts, term, loss) = (&self.counts, self.term, &self.loss);
        objective(pass, labels, counts, self.target, term, loss)
    }
}

fn objective(
    pass: &ForwardPass,
    labels: &[u8],
    counts: &ClassCounts,
    target: Option<&PrototypeSet>,
    term: SecondTerm,
    loss: &LossConfig,
) -> Result<(BatchLoss, Tensor, Option<Tensor>)> {
    let (ls, mut d_logits) = losses::supervised_loss_with_grad(&pass.logits, labels, counts)?;
    let active = match target {
        Some(t) if term != SecondTerm::None => Some(t),
        _ => None,
    };
    let Some(target) = active else {
        return Ok((BatchLoss { total: ls, supervised: ls, second: None }, d_logits, None));
    };
    let lambda = loss.lambda;
    d_logits.data_mut().iter_mut().for_each(|g| *g *= 1.0 - lambda);
    let (second, d_embed) = match second_term(&pass.embeddings, labels, target, term, counts, loss)? {
        Some((v, mut d)) => {
            d.data_mut().iter_mut().for_each(|g| *g *= lambda);
            (Some(v), Some(d))
        }
        None => (None, None),
    };
    let total = losses::total_loss(ls, second.unwrap_or(0.0), lambda);
    Ok((BatchLoss { total, supervised: ls, second }, d_logits, d_embed))
}

/// Train-mode forward and loss on one batch, without touching gradients.
pub fn batch_loss(
    model: &mut LcnnModel,
    x: &Tensor,
    labels: &[u8],
    objective: &Objective<'_>,
    rng: &mut Rng,
) -> Result<BatchLoss> {
    let pass = model.forward_train(x, rng)?;
    Ok(objective.evaluate(&pass, labels)?.0)
}

/// Like [`batch_loss`], then backpropagates and accumulates parameter
/// gradients into the model. Returns the forward pass for prototype
/// bookkeeping.
pub fn batch_backward(
    model: &mut LcnnModel,
    x: &Tensor,
    labels: &[u8],
    objective: &Objective<'_>,
    rng: &mut Rng,
) -> Result<(BatchLoss, ForwardPass)> {
    let pass = model.forward_train(x, rng)?;
    let (value, d_logits, d_embed) = objective.evaluate(&pass, labels)?;
    model.backward(&pass, &d_logits, d_embed.as_ref())?;
    Ok((value, pass))
}

/// Mini-batch index lists for one epoch. A trailing batch of one sample is
/// folded into the previous batch, since batch norm needs two rows.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(last);
    }
    batches
}

/// Per-client training state, owned by whichever thread runs the client.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: u32,
    pub data: ClientData,
    pub model: LcnnModel,
    pub optimizer: Optimizer,
    /// Global targets from the latest broadcast, overwritten each round.
    pub global: Option<PrototypeSet>,
    /// Rounds in which the next local update fails on purpose, with the
    /// number of failures left. Used to exercise server retries.
    pub injected_failures: Vec<(u32, u32)>,
}

impl ClientState {
    /// Every client starts from the same seeded initialization.
    pub fn new(data: ClientData, model: &LcnnConfig, config: &RoundConfig) -> Result<Self> {
        if data.train.is_empty() {
            return Err(Error::EmptyInput(format!("client {} has no training data", data.client_id)));
        }
        let model = LcnnModel::init(model.clone(), rng::derive_seed(config.seed, &[rng::TAG_INIT]))?;
        Ok(ClientState {
            client_id: data.client_id,
            data,
            model,
            optimizer: Optimizer::new(config.optimizer),
            global: None,
            injected_failures: Vec::new(),
        })
    }

    pub(crate) fn take_injected_failure(&mut self, round: u32) -> bool {
        match self.injected_failures.iter_mut().find(|(r, left)| *r == round && *left > 0) {
            Some((_, left)) => {
                *left -= 1;
                true
            }
            None => false,
        }
    }
}

/// Result of one local update.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalOutcome {
    pub prototypes: PrototypeSet,
    /// Sample-weighted mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// The client lacks a class, so the regularizer was suppressed.
    pub degenerate: bool,
}

/// Runs `config.epochs` epochs on the client's training split and returns
/// prototypes from the final epoch's train-mode embeddings.
pub fn local_update(state: &mut ClientState, round: u32, config: &RoundConfig) -> Result<LocalOutcome> {
    let train = &state.data.train;
    if train.is_empty() {
        return Err(Error::EmptyInput(format!("client {} has no training data", state.client_id)));
    }
    if config.epochs == 0 {
        return Err(Error::Config("local epochs must be at least 1".into()));
    }
    let counts = train.counts();
    let degenerate = !counts.has_both();
    let target = if degenerate || config.loss.lambda == 0.0 { None } else { state.global.as_ref() };
    let objective = Objective { counts, target, term: config.second_term, loss: config.loss };
    let cid = state.client_id as u64;
    let n = train.len();
    let mut epoch_losses = Vec::with_capacity(config.epochs as usize);
    let mut running = RunningMean::new();
    for epoch in 0..config.epochs {
        let path = [cid, round as u64, epoch as u64];
        let mut shuffle = rng::stream(config.seed, &[rng::TAG_SHUFFLE, path[0], path[1], path[2]]);
        let mut dropout = rng::stream(config.seed, &[rng::TAG_DROPOUT, path[0], path[1], path[2]]);
        let last = epoch + 1 == config.epochs;
        let mut sum = 0.0;
        for idx in epoch_batches(n, config.batch_size, &mut shuffle) {
            let (x, labels) = train.batch(&idx);
            let (value, pass) = batch_backward(&mut state.model, &x, &labels, &objective, &mut dropout)?;
            if !value.total.is_finite() {
                return Err(Error::State(format!("client {} loss diverged in epoch {epoch}", state.client_id)));
            }
            state.model.clip_gradients();
            state.optimizer.step(state.model.params_mut())?;
            if last {
                running.update(&pass.embeddings, &labels)?;
            }
            sum += value.total * idx.len() as f64;
        }
        epoch_losses.push(sum / n as f64);
    }
    Ok(LocalOutcome { prototypes: running.finalize(), epoch_losses, degenerate })
}

/// Argmax class per row of `[N, 2]` logits; ties go to class 0.
pub fn predict(logits: &Tensor) -> Vec<u8> {
    logits.data().chunks_exact(2).map(|r| u8::from(r[1] > r[0])).collect()
}

/// Eval-mode confusion counts over a dataset, in chunks of `chunk` windows.
pub fn evaluate(model: &LcnnModel, data: &Dataset, chunk: usize, exec: Execution) -> Result<ConfusionCounts> {
    let n = data.len();
    let chunk = chunk.max(1);
    let parts = exec.map_range(n.div_ceil(chunk), |c| {
        let idx: Vec<usize> = (c * chunk..((c + 1) * chunk).min(n)).collect();
        let (x, labels) = data.batch(&idx);
        let logits = model.classify(&x)?;
        ConfusionCounts::from_predictions(&predict(&logits), &labels)
    });
    let mut total = ConfusionCounts::default();
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}
