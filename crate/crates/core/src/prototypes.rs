//! Class prototypes: per-class embedding means on a client, and their
//! sample-count-weighted aggregation on the server.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndkernel::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub vector: Vec<f64>,
    pub count: u64,
}

/// Per-class prototype vectors with sample counts. A class with no samples
/// has no entry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    classes: BTreeMap<u16, ClassPrototype>,
}

impl PrototypeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class: u16, vector: Vec<f64>, count: u64) -> Result<()> {
        if count == 0 {
            return Err(Error::Config(format!("class {class} inserted with zero count")));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("class {class} prototype is not finite")));
        }
        if let Some(d) = self.dim() {
            if !self.classes.contains_key(&class) && d != vector.len() {
                return Err(Error::Dimension(format!(
                    "class {class} prototype has dim {}, set has dim {d}",
                    vector.len()
                )));
            }
        }
        self.classes.insert(class, ClassPrototype { vector, count });
        Ok(())
    }

    pub fn get(&self, class: u16) -> Option<&ClassPrototype> {
        self.classes.get(&class)
    }

    pub fn vector(&self, class: u16) -> Option<&[f64]> {
        self.classes.get(&class).map(|p| p.vector.as_slice())
    }

    pub fn count(&self, class: u16) -> u64 {
        self.classes.get(&class).map_or(0, |p| p.count)
    }

    pub fn contains(&self, class: u16) -> bool {
        self.classes.contains_key(&class)
    }

    pub fn has_both_classes(&self) -> bool {
        self.contains(0) && self.contains(1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u16, &ClassPrototype)> {
        self.classes.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.classes.values().next().map(|p| p.vector.len())
    }
}

fn check_labels(n: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} embeddings", labels.len())));
    }
    Ok(())
}

/// Mean embedding per class present in `labels`.
pub fn compute_local_prototypes(embeddings: &Tensor, labels: &[u8]) -> Result<PrototypeSet> {
    let mut rm = RunningMean::default();
    rm.update(embeddings, labels)?;
    Ok(rm.finalize())
}

/// Streaming accumulator of per-class embedding sums.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningMean {
    sums: BTreeMap<u16, (Vec<f64>, u64)>,
}

impl RunningMean {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, embeddings: &Tensor, labels: &[u8]) -> Result<()> {
        embeddings.expect_rank(2, "prototype embeddings")?;
        let (n, m) = (embeddings.dim(0), embeddings.dim(1));
        check_labels(n, labels)?;
        if let Some((v, _)) = self.sums.values().next() {
            if n > 0 && v.len() != m {
                return Err(Error::Dimension(format!("embedding dim {m} after dim {}", v.len())));
            }
        }
        for (row, &y) in embeddings.data().chunks_exact(m.max(1)).zip(labels) {
            let (sum, count) = self.sums.entry(y as u16).or_insert_with(|| (vec![0.0; m], 0));
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
            *count += 1;
        }
        Ok(())
    }

    pub fn finalize(&self) -> PrototypeSet {
        let mut set = PrototypeSet::new();
        for (&class, (sum, count)) in &self.sums {
            if *count > 0 {
                let v = sum.iter().map(|s| s / *count as f64).collect();
                set.classes.insert(class, ClassPrototype { vector: v, count: *count });
            }
        }
        set
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// Σ|D_ij|·C_ij / Σ|D_ij| over the clients holding class j.
    #[default]
    Normalized,
    /// The printed form (1/|N_j|)·Σ (|D_ij|/|N_j|)·C_ij, kept for comparison.
    Literal,
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(AggregationMode::Normalized),
            "literal" => Ok(AggregationMode::Literal),
            other => Err(Error::Config(format!("unknown aggregation mode `{other}`"))),
        }
    }
}

/// Global prototypes from client uploads. Sums run in client-id order so the
/// result does not depend on arrival order.
pub fn aggregate_global(locals: &[(u32, PrototypeSet)], mode: AggregationMode) -> Result<PrototypeSet> {
    let mut ordered: Vec<&(u32, PrototypeSet)> = locals.iter().collect();
    ordered.sort_by_key(|(id, _)| *id);
    let mut by_class: BTreeMap<u16, Vec<(u64, &[f64])>> = BTreeMap::new();
    let mut dim = None;
    for (_, set) in &ordered {
        for (class, proto) in set.iter() {
            let d = *dim.get_or_insert(proto.vector.len());
            if d != proto.vector.len() {
                return Err(Error::Dimension(format!(
                    "prototype dim {} differs from {d}",
                    proto.vector.len()
                )));
            }
            by_class.entry(class).or_default().push((proto.count, &proto.vector));
        }
    }
    let mut out = PrototypeSet::new();
    for (class, members) in by_class {
        let total: u64 = members.iter().map(|(n, _)| n).sum();
        let v = match mode {
            AggregationMode::Normalized => weighted_mean(&members, total),
            AggregationMode::Literal => {
                let k2 = (members.len() * members.len()) as f64;
                let mut sum = vec![0.0; members[0].1.len()];
                for (n, v) in &members {
                    for (s, x) in sum.iter_mut().zip(v.iter()) {
                        *s += *n as f64 * x;
                    }
                }
                sum.into_iter().map(|s| s / k2).collect()
            }
        };
        out.insert(class, v, total)?;
    }
    Ok(out)
}

// Offsets from the first member keep identical inputs exact; the clamp keeps
// rounding inside the componentwise hull.
fn weighted_mean(members: &[(u64, &[f64])], total: u64) -> Vec<f64> {
    let base = members[0].1;
    let total = total as f64;
    (0..base.len())
        .map(|k| {
            let (mut lo, mut hi) = (base[k], base[k]);
            let mut offset = 0.0;
            for (n, v) in members {
                offset += (*n as f64 / total) * (v[k] - base[k]);
                lo = lo.min(v[k]);
                hi = hi.max(v[k]);
            }
            (base[k] + offset).clamp(lo, hi)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(entries: &[(u16, Vec<f64>, u64)]) -> PrototypeSet {
        let mut s = PrototypeSet::new();
        for (c, v, n) in entries {
            s.insert(*c, v.clone(), *n).unwrap();
        }
        s
    }

    #[test]
    fn single_sample_prototype() {
        let e = Tensor::new(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let p = compute_local_prototypes(&e, &[1]).unwrap();
        assert_eq!(p.vector(1).unwrap(), &[1.0, -2.0, 0.5]);
        assert!(!p.contains(0));
    }

    #[test]
    fn class_mean() {
        let e = Tensor::new(&[3, 2], vec![0.0, 0.0, 2.0, 2.0, 7.0, 7.0]).unwrap();
        let p = compute_local_prototypes(&e, &[0, 0, 1]).unwrap();
        assert_eq!(p.vector(0).unwrap(), &[1.0, 1.0]);
        assert_eq!(p.count(0), 2);
        assert_eq!(p.count(1), 1);
    }

    #[test]
    fn empty_batch_leaves_state() {
        let mut rm = RunningMean::new();
        rm.update(&Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap(), &[0]).unwrap();
        let before = rm.clone();
        rm.update(&Tensor::zeros(&[0, 2]), &[]).unwrap();
        assert_eq!(rm, before);
        assert!(RunningMean::new().finalize().is_empty());
    }

    #[test]
    fn single_client_aggregate_is_identity() {
        let s = set(&[(0, vec![1.0, 2.0], 5), (1, vec![-1.0, 0.5], 2)]);
        let g = aggregate_global(&[(3, s.clone())], AggregationMode::Normalized).unwrap();
        assert_eq!(g, s);
    }

    #[test]
    fn weighted_means() {
        let a = set(&[(0, vec![0.0], 1)]);
        let b = set(&[(0, vec![4.0], 3)]);
        let g = aggregate_global(&[(0, a.clone()), (1, b)], AggregationMode::Normalized).unwrap();
        assert_eq!(g.vector(0).unwrap(), &[3.0]);
        assert_eq!(g.count(0), 4);
        let b1 = set(&[(0, vec![4.0], 1)]);
        let g = aggregate_global(&[(0, a.clone()), (1, b1.clone())], AggregationMode::Normalized).unwrap();
        assert_eq!(g.vector(0).unwrap(), &[2.0]);
        let lit = aggregate_global(&[(0, a), (1, b1)], AggregationMode::Literal).unwrap();
        assert_eq!(lit.vector(0).unwrap(), &[1.0]);
    }

    #[test]
    fn clients_missing_a_class_are_excluded() {
        let a = set(&[(0, vec![2.0], 10)]);
        let b = set(&[(0, vec![4.0], 10), (1, vec![9.0], 1)]);
        let g = aggregate_global(&[(0, a), (1, b)], AggregationMode::Normalized).unwrap();
        assert_eq!(g.vector(0).unwrap(), &[3.0]);
        assert_eq!(g.vector(1).unwrap(), &[9.0]);
        assert_eq!(g.count(1), 1);
    }

    #[test]
    fn empty_input_gives_empty_set() {
        assert!(aggregate_global(&[], AggregationMode::Normalized).unwrap().is_empty());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = set(&[(0, vec![2.0], 1)]);
        let b = set(&[(0, vec![4.0, 1.0], 1)]);
        assert!(aggregate_global(&[(0, a), (1, b)], AggregationMode::Normalized).is_err());
    }
}
