//! Fβ, balanced accuracy, and cross-client macro means. Icing (label 1) is
//! the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BETA: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    pub fn from_predictions(predicted: &[u8], actual: &[u8]) -> Result<Self> {
        if predicted.len() != actual.len() {
            return Err(Error::Dimension(format!(
                "{} predictions for {} labels",
                predicted.len(),
                actual.len()
            )));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            c.record(p, a);
        }
        Ok(c)
    }

    pub fn record(&mut self, predicted: u8, actual: u8) {
        match (predicted == 1, actual == 1) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(precision, recall)`, with 0/0 taken as 0.
pub fn precision_recall(c: &ConfusionCounts) -> (f64, f64) {
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let num = (1.0 + b2) * precision * recall;
    if num == 0.0 {
        return 0.0;
    }
    num / (b2 * precision + recall)
}

/// Fβ straight from counts, `(1+β²)tp / ((1+β²)tp + β²fn + fp)`, with one
/// rounding when β² is a small integer.
pub fn f_beta_counts(c: &ConfusionCounts, beta: f64) -> f64 {
    let b2 = beta * beta;
    let num = (1.0 + b2) * c.tp as f64;
    if num == 0.0 {
        return 0.0;
    }
    num / (num + b2 * c.fn_ as f64 + c.fp as f64)
}

/// `½(tp/(tp+fn) + tn/(tn+fp))`, evaluated over a common denominator.
pub fn balanced_accuracy(c: &ConfusionCounts) -> Result<f64> {
    let (pos, neg) = (c.tp as u128 + c.fn_ as u128, c.tn as u128 + c.fp as u128);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("balanced accuracy needs both classes present".into()));
    }
    let num = c.tp as u128 * neg + c.tn as u128 * pos;
    Ok(num as f64 / (2 * pos * neg) as f64)
}

/// One client's scores on one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientScore {
    pub confusion: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub fbeta: f64,
    pub ba: f64,
}

impl ClientScore {
    pub fn from_confusion(confusion: ConfusionCounts, beta: f64) -> Result<Self> {
        let (precision, recall) = precision_recall(&confusion);
        Ok(ClientScore {
            confusion,
            precision,
            recall,
            fbeta: f_beta_counts(&confusion, beta),
            ba: balanced_accuracy(&confusion)?,
        })
    }
}

/// Unweighted means `(mFβ, mBA)` over clients.
pub fn macro_means(per_client: &[(f64, f64)]) -> Result<(f64, f64)> {
    if per_client.is_empty() {
        return Err(Error::EmptyInput("macro mean over zero clients".into()));
    }
    let k = per_client.len() as f64;
    let f = per_client.iter().map(|p| p.0).sum::<f64>() / k;
    let b = per_client.iter().map(|p| p.1).sum::<f64>() / k;
    Ok((f, b))
}

/// Averages per-round macro means over rounds.
pub fn round_averaged(per_round: &[(f64, f64)]) -> Result<(f64, f64)> {
    macro_means(per_round)
}
