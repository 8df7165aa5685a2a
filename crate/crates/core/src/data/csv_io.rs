//! CSV ingestion for real sensor logs: `timestamp,ch01..ch16,label`.
//!
//! Missing cells (empty, `NA`, `NaN`) are forward-filled, and any still
//! missing (leading gaps) take the channel mean of observed values.
//! Normalization is a per-channel z-score fitted on the train split.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::window::{split_train_test, window_slice, LabelRule};
use super::{ClientData, Dataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub timestamp: String,
    pub channels: Vec<String>,
    pub label: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema::with_channels(16)
    }
}

impl CsvSchema {
    pub fn with_channels(d: usize) -> Self {
        CsvSchema {
            timestamp: "timestamp".into(),
            channels: (1..=d).map(|i| format!("ch{i:02}")).collect(),
            label: "label".into(),
        }
    }
}

/// Parsed, imputed rows of one CSV file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub timestamps: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub flags: Vec<u8>,
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

pub fn read_csv(path: &Path, schema: &CsvSchema) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let mut ts_col = None;
    let mut label_col = None;
    let mut ch_cols = vec![None; schema.channels.len()];
    for (i, h) in headers.iter().enumerate() {
        let h = h.trim();
        if h == schema.timestamp {
            ts_col = Some(i);
        } else if h == schema.label {
            label_col = Some(i);
        } else if let Some(c) = schema.channels.iter().position(|n| n == h) {
            ch_cols[c] = Some(i);
        } else {
            return Err(Error::Schema(format!("unknown column `{h}`")));
        }
    }
    let ts_col = ts_col.ok_or_else(|| Error::Schema(format!("missing column `{}`", schema.timestamp)))?;
    let label_col = label_col.ok_or_else(|| Error::Schema(format!("missing column `{}`", schema.label)))?;
    let ch_cols: Vec<usize> = ch_cols
        .iter()
        .zip(&schema.channels)
        .map(|(c, n)| c.ok_or_else(|| Error::Schema(format!("missing column `{n}`"))))
        .collect::<Result<_>>()?;

    let d = ch_cols.len();
    let mut timestamps = Vec::new();
    let mut raw: Vec<Vec<Option<f64>>> = Vec::new();
    let mut flags = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::Parse { line, msg: format!("expected {} fields, found {}", headers.len(), rec.len()) });
        }
        timestamps.push(rec[ts_col].to_string());
        let label = rec[label_col].trim();
        flags.push(match label {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::Parse { line, msg: format!("label `{other}` is not 0 or 1") }),
        });
        let mut row = Vec::with_capacity(d);
        for (&col, name) in ch_cols.iter().zip(&schema.channels) {
            let cell = &rec[col];
            if is_missing(cell) {
                row.push(None);
            } else {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("column `{name}`: `{cell}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse { line, msg: format!("column `{name}` is not finite") });
                }
                row.push(Some(v));
            }
        }
        raw.push(row);
    }
    Ok(RawSeries { timestamps, rows: impute(&raw, d), flags })
}

fn impute(raw: &[Vec<Option<f64>>], d: usize) -> Vec<Vec<f64>> {
    let mut means = vec![0.0; d];
    for (c, m) in means.iter_mut().enumerate() {
        let obs: Vec<f64> = raw.iter().filter_map(|r| r[c]).collect();
        if !obs.is_empty() {
            *m = obs.iter().sum::<f64>() / obs.len() as f64;
        }
    }
    let mut last: Vec<Option<f64>> = vec![None; d];
    raw.iter()
        .map(|r| {
            (0..d)
                .map(|c| {
                    if let Some(v) = r[c] {
                        last[c] = Some(v);
                    }
                    last[c].unwrap_or(means[c])
                })
                .collect()
        })
        .collect()
}

/// Per-channel standardization with a floor on the standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScore {
    pub const STD_FLOOR: f64 = 1e-8;

    pub fn fit(ds: &Dataset) -> Self {
        let d = ds.channels();
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0usize;
        for i in 0..ds.len() {
            for row in ds.window_values(i).chunks_exact(d) {
                for c in 0..d {
                    mean[c] += row[c];
                    sq[c] += row[c] * row[c];
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = mean.iter().map(|m| m / n).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| (s / n - m * m).max(0.0).sqrt()).collect();
        ZScore { mean, std }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let d = self.mean.len();
        for row in ds.values_mut().chunks_exact_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s.max(Self::STD_FLOOR);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvLoadOptions {
    pub window: usize,
    pub stride: usize,
    pub label_rule: LabelRule,
    pub train_fraction: f64,
    pub normalize: bool,
    pub seed: u64,
    pub client_id: u32,
}

impl CsvLoadOptions {
    pub fn new(window: usize) -> Self {
        CsvLoadOptions {
            window,
            stride: (window / 2).max(1),
            label_rule: LabelRule::Any,
            train_fraction: 0.6,
            normalize: true,
            seed: 0,
            client_id: 0,
        }
    }
}

/// Reads, windows, splits and normalizes one client's CSV log.
pub fn load_csv(path: &Path, schema: &CsvSchema, opts: &CsvLoadOptions) -> Result<ClientData> {
    let raw = read_csv(path, schema)?;
    let windows = window_slice(&raw.rows, &raw.flags, opts.window, opts.stride, opts.label_rule, opts.client_id)?;
    let all = Dataset::from_samples(opts.window, schema.channels.len(), windows)?;
    let (mut train, mut test) = split_train_test(&all, opts.train_fraction, opts.seed)?;
    if opts.normalize {
        let z = ZScore::fit(&train);
        z.apply(&mut train);
        z.apply(&mut test);
    }
    Ok(ClientData { client_id: opts.client_id, train, test })
}

/// Writes windows back to back (window `i` occupies rows `i·T..(i+1)·T`),
/// every row carrying its window's label. Reading back with stride `T`
/// reproduces the windows exactly.
pub fn write_csv(path: &Path, ds: &Dataset, schema: &CsvSchema) -> Result<()> {
    if schema.channels.len() != ds.channels() {
        return Err(Error::Schema(format!(
            "schema has {} channels, dataset {}",
            schema.channels.len(),
            ds.channels()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![schema.timestamp.clone()];
    header.extend(schema.channels.iter().cloned());
    header.push(schema.label.clone());
    w.write_record(&header)?;
    let d = ds.channels();
    let mut row_idx = 0u64;
    for i in 0..ds.len() {
        let label = ds.labels()[i].to_string();
        for row in ds.window_values(i).chunks_exact(d) {
            let mut rec = vec![row_idx.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            rec.push(label.clone());
            w.write_record(&rec)?;
            row_idx += 1;
        }
    }
    w.flush()?;
    Ok(())
}
