use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, WindowSample};
use crate::error::{Error, Result};

/// How per-step icing flags become a window label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelRule {
    /// Icing if any step in the window is flagged.
    #[default]
    Any,
    /// Icing if more than half of the steps are flagged.
    Majority,
}

/// Slices an `L×d` series (rows are time steps) into `T×d` windows.
pub fn window_slice(
    series: &[Vec<f64>],
    flags: &[u8],
    window: usize,
    stride: usize,
    rule: LabelRule,
    turbine_id: u32,
) -> Result<Vec<WindowSample>> {
    if window == 0 || stride == 0 {
        return Err(Error::Config("window and stride must be positive".into()));
    }
    if flags.len() != series.len() {
        return Err(Error::Dimension(format!("{} flags for {} rows", flags.len(), series.len())));
    }
    let len = series.len();
    if len < window {
        return Err(Error::Size(format!("series of length {len} is shorter than window {window}")));
    }
    let count = (len - window) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        let rows = &series[start..start + window];
        let iced = flags[start..start + window].iter().filter(|&&f| f != 0).count();
        let label = match rule {
            LabelRule::Any => u8::from(iced > 0),
            LabelRule::Majority => u8::from(2 * iced > window),
        };
        out.push(WindowSample { values: rows.concat(), label, turbine_id });
    }
    Ok(out)
}

/// Stratified split: each class contributes `round(fraction · n_class)`
/// windows to train (clamped so both splits keep a class with ≥ 2 windows).
pub fn split_train_test(windows: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("train fraction {fraction} outside [0, 1]")));
    }
    let counts = windows.counts();
    if !counts.has_both() {
        return Err(Error::Stratification(format!(
            "need both classes, have {} non-icing and {} icing",
            counts.n0, counts.n1
        )));
    }
    let mut rng = crate::rng::stream(seed, &[crate::rng::TAG_SPLIT]);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..windows.len()).filter(|&i| windows.labels()[i] == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut k = (fraction * n as f64).round() as usize;
        if n >= 2 {
            k = k.clamp(1, n - 1);
        }
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((windows.subset(&train), windows.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(len: usize) -> Vec<Vec<f64>> {
        (0..len).map(|i| vec![i as f64, -(i as f64)]).collect()
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_slice(&series(4), &[0; 4], 4, 2, LabelRule::Any, 0).unwrap().len(), 1);
        let w = window_slice(&series(10), &[0; 10], 4, 2, LabelRule::Any, 0).unwrap();
        assert_eq!(w.len(), 4);
        assert!(w.iter().all(|s| s.label == 0));
        assert_eq!(w[1].values[..2], [2.0, -2.0]);
        assert!(matches!(window_slice(&series(3), &[0; 3], 4, 1, LabelRule::Any, 0), Err(Error::Size(_))));
    }

    #[test]
    fn label_rules() {
        let mut flags = vec![0u8; 8];
        flags[3] = 1;
        let any = window_slice(&series(8), &flags, 4, 4, LabelRule::Any, 0).unwrap();
        assert_eq!(any.iter().map(|s| s.label).collect::<Vec<_>>(), vec![1, 0]);
        let maj = window_slice(&series(8), &flags, 4, 4, LabelRule::Majority, 0).unwrap();
        assert_eq!(maj.iter().map(|s| s.label).collect::<Vec<_>>(), vec![0, 0]);
    }

    fn toy(n0: usize, n1: usize) -> Dataset {
        let samples = (0..n0 + n1)
            .map(|i| WindowSample { values: vec![i as f64], label: u8::from(i >= n0), turbine_id: 0 })
            .collect();
        Dataset::from_samples(1, 1, samples).unwrap()
    }

    #[test]
    fn stratified_split() {
        let d = toy(90, 10);
        let (tr, te) = split_train_test(&d, 0.6, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (60, 40));
        assert!(tr.counts().has_both() && te.counts().has_both());
        let mut all: Vec<f64> = tr.samples().chain(te.samples()).map(|s| s.values[0]).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..100).map(|i| i as f64).collect::<Vec<_>>());
        let again = split_train_test(&d, 0.6, 3).unwrap();
        assert_eq!(again.0, tr);
    }

    #[test]
    fn split_needs_both_classes() {
        assert!(matches!(split_train_test(&toy(10, 0), 0.6, 0), Err(Error::Stratification(_))));
    }
}
