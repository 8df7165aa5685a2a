//! Class-imbalance-aware losses: the count-weighted supervised loss, the
//! weighted prototype contrastive loss, their convex combination, and the
//! L2 prototype penalty used as an ablation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndkernel::Tensor;
use crate::prototypes::PrototypeSet;

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub tau: f64,
    pub gamma: f64,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.25, tau: 0.5, gamma: 2.0, eps: DEFAULT_EPS }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma {} must be nonnegative", self.gamma)));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config(format!("eps {} must be positive", self.eps)));
        }
        Ok(())
    }
}

/// Which regularizer joins the supervised loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SecondTerm {
    None,
    L2,
    #[default]
    Contrastive,
}

impl std::str::FromStr for SecondTerm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SecondTerm::None),
            "l2" => Ok(SecondTerm::L2),
            "contrastive" => Ok(SecondTerm::Contrastive),
            other => Err(Error::Config(format!("unknown second loss term `{other}`"))),
        }
    }
}

/// Full-training-set class counts of one client.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub n0: u64,
    pub n1: u64,
}

impl ClassCounts {
    pub fn new(n0: u64, n1: u64) -> Self {
        ClassCounts { n0, n1 }
    }

    pub fn from_labels(labels: &[u8]) -> Self {
        let n1 = labels.iter().filter(|&&y| y == 1).count() as u64;
        ClassCounts { n0: labels.len() as u64 - n1, n1 }
    }

    pub fn total(&self) -> u64 {
        self.n0 + self.n1
    }

    pub fn get(&self, class: u8) -> u64 {
        if class == 0 {
            self.n0
        } else {
            self.n1
        }
    }

    pub fn has_both(&self) -> bool {
        self.n0 > 0 && self.n1 > 0
    }

    /// N / (C · n_j) for class j.
    pub fn supervised_weight(&self, class: u8) -> f64 {
        self.total() as f64 / (2.0 * self.get(class) as f64)
    }
}

/// Weighted supervised loss and its gradient wrt the logits.
///
/// Batch mean of `-(N / (C·n_j)) · log softmax(logits)_j` for true class j.
pub fn supervised_loss_with_grad(logits: &Tensor, labels: &[u8], counts: &ClassCounts) -> Result<(f64, Tensor)> {
    logits.expect_rank(2, "supervised logits")?;
    let (n, c) = (logits.dim(0), logits.dim(1));
    if c != 2 {
        return Err(Error::Dimension(format!("expected 2 logits per sample, got {c}")));
    }
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} samples", labels.len())));
    }
    if n == 0 {
        return Err(Error::EmptyInput("supervised loss over empty batch".into()));
    }
    for &y in labels {
        if y > 1 {
            return Err(Error::Config(format!("label {y} is not 0 or 1")));
        }
        if counts.get(y) == 0 {
            return Err(Error::ImbalanceConfig(format!("class {y} present with zero training count")));
        }
    }
    let weights = [counts.supervised_weight(0), counts.supervised_weight(1)];
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * 2];
    for ((row, g), &y) in logits.data().chunks_exact(2).zip(grad.chunks_exact_mut(2)).zip(labels) {
        let mx = row[0].max(row[1]);
        let lse = mx + ((row[0] - mx).exp() + (row[1] - mx).exp()).ln();
        let w = weights[y as usize];
        loss -= w * (row[y as usize] - lse);
        for j in 0..2 {
            let p = (row[j] - lse).exp();
            g[j] = w * (p - if j == y as usize { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::new(&[n, 2], grad)?))
}

pub fn supervised_loss(logits: &Tensor, labels: &[u8], counts: &ClassCounts) -> Result<f64> {
    Ok(supervised_loss_with_grad(logits, labels, counts)?.0)
}

/// `(w_pos, w_neg) = ((1/(n0+ε))^γ, (1/(n1+ε))^γ)`.
pub fn class_weights(counts: &ClassCounts, gamma: f64, eps: f64) -> (f64, f64) {
    (
        (1.0 / (counts.n0 as f64 + eps)).powf(gamma),
        (1.0 / (counts.n1 as f64 + eps)).powf(gamma),
    )
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::SimilarityUndefined("zero-norm prototype".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// d cos(a, b) / d a.
fn cosine_grad(a: &[f64], b: &[f64], sim: f64) -> Vec<f64> {
    let (na, nb) = (norm(a), norm(b));
    a.iter().zip(b).map(|(x, y)| y / (na * nb) - sim * x / (na * na)).collect()
}

/// One anchor's term: `-log(e^{s_pos/τ} / (e^{s_pos/τ} + e^{s_neg/τ} + ε))`
/// with its gradient wrt the anchor vector.
fn anchor_term(anchor: &[f64], pos: &[f64], neg: &[f64], tau: f64, eps: f64) -> Result<(f64, Vec<f64>)> {
    let sp = cosine_similarity(anchor, pos)?;
    let sn = cosine_similarity(anchor, neg)?;
    let (ep, en) = ((sp / tau).exp(), (sn / tau).exp());
    let denom = ep + en + eps;
    let loss = -(sp / tau) + denom.ln();
    let dsp = (ep / denom - 1.0) / tau;
    let dsn = (en / denom) / tau;
    let gp = cosine_grad(anchor, pos, sp);
    let gn = cosine_grad(anchor, neg, sn);
    let grad = gp.iter().zip(&gn).map(|(a, b)| dsp * a + dsn * b).collect();
    Ok((loss, grad))
}

fn both<'a>(set: &'a PrototypeSet, which: &str) -> Result<(&'a [f64], &'a [f64])> {
    match (set.vector(0), set.vector(1)) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::Config(format!("{which} prototype set lacks class 0 or 1"))),
    }
}

/// `(L_pos, L_neg)`: class-0 and class-1 local prototypes contrasted against
/// the global prototypes, cosine similarity scaled by `1/τ`.
pub fn contrastive_pair_losses(local: &PrototypeSet, global: &PrototypeSet, tau: f64, eps: f64) -> Result<(f64, f64)> {
    let (c0, c1) = both(local, "local")?;
    let (g0, g1) = both(global, "global")?;
    let (lp, _) = anchor_term(c0, g0, g1, tau, eps)?;
    let (ln, _) = anchor_term(c1, g1, g0, tau, eps)?;
    Ok((lp, ln))
}

/// Weighted contrastive loss over raw prototype vectors, with gradients wrt
/// the two local vectors. Global vectors are constants.
pub fn contrastive_loss_vectors(
    local: (&[f64], &[f64]),
    global: (&[f64], &[f64]),
    counts: &ClassCounts,
    config: &LossConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (w_pos, w_neg) = class_weights(counts, config.gamma, config.eps);
    let (lp, gp) = anchor_term(local.0, global.0, global.1, config.tau, config.eps)?;
    let (ln, gn) = anchor_term(local.1, global.1, global.0, config.tau, config.eps)?;
    let d0 = gp.into_iter().map(|g| w_pos * g).collect();
    let d1 = gn.into_iter().map(|g| w_neg * g).collect();
    Ok((w_pos * lp + w_neg * ln, d0, d1))
}

/// `L_c = w_pos·L_pos + w_neg·L_neg`.
pub fn contrastive_loss(
    local: &PrototypeSet,
    global: &PrototypeSet,
    counts: &ClassCounts,
    config: &LossConfig,
) -> Result<f64> {
    let l = both(local, "local")?;
    let g = both(global, "global")?;
    Ok(contrastive_loss_vectors(l, g, counts, config)?.0)
}

/// `(1-λ)·L_s + λ·L_c`.
pub fn total_loss(supervised: f64, second: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * supervised + lambda * second
}

/// Euclidean distance and its gradient wrt `local` (zero at coincidence).
pub fn l2_distance_with_grad(local: &[f64], global: &[f64]) -> Result<(f64, Vec<f64>)> {
    if local.len() != global.len() {
        return Err(Error::Dimension(format!("vectors of length {} and {}", local.len(), global.len())));
    }
    let diff: Vec<f64> = local.iter().zip(global).map(|(a, b)| a - b).collect();
    let d = norm(&diff);
    let grad = if d > 0.0 { diff.iter().map(|x| x / d).collect() } else { vec![0.0; diff.len()] };
    Ok((d, grad))
}

/// Sum over classes present in both sets of ‖C_j − Ḡ_j‖₂.
pub fn l2_proto_penalty(local: &PrototypeSet, global: &PrototypeSet) -> Result<f64> {
    let mut total = 0.0;
    for (class, proto) in local.iter() {
        if let Some(g) = global.vector(class) {
            total += l2_distance_with_grad(&proto.vector, g)?.0;
        }
    }
    Ok(total)
}
