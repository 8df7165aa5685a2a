//! SCADA-like synthetic windows with exact class ratios and per-client
//! distribution shift.
//!
//! Non-icing windows are correlated AR(1) processes. Icing windows add a
//! signature on a subset of channels: a level shift that ramps in after a
//! random onset, plus a damped variance on the same channels. Each client
//! rotates the signature channels and applies its own per-channel affine
//! transform.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClientData, Dataset, WindowSample};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalParams {
    /// AR(1) coefficients are drawn uniformly from this range per channel.
    pub ar_range: (f64, f64),
    /// Off-diagonal scale of the channel mixing matrix.
    pub mixing: f64,
    /// Number of channels carrying the icing signature.
    pub signature_channels: usize,
    /// Mean level shift (in noise standard deviations) on signature channels.
    pub shift: f64,
    /// Noise multiplier on signature channels once icing has set in.
    pub variance_factor: f64,
    /// Signature channels move by this many positions per client.
    pub rotation_step: usize,
    /// Standard deviation of the per-client channel offsets.
    pub client_offset_sd: f64,
    /// Standard deviation of the per-client log channel scales.
    pub client_log_scale_sd: f64,
}

impl Default for SignalParams {
    fn default() -> Self {
        SignalParams {
            ar_range: (0.8, 0.95),
            mixing: 0.3,
            signature_channels: 4,
            shift: 0.9,
            variance_factor: 0.6,
            rotation_step: 1,
            client_offset_sd: 1.0,
            client_log_scale_sd: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub channels: usize,
    pub window: usize,
    /// Train imbalance, non-icing per icing window.
    pub train_ratio: u32,
    pub test_ratio: u32,
    /// Requested train windows per client; the exact count is the largest
    /// multiple of `train_ratio + 1` not above it.
    pub train_windows: usize,
    pub train_fraction: f64,
    pub clients: usize,
    pub signal: SignalParams,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            channels: 16,
            window: 32,
            train_ratio: 20,
            test_ratio: 10,
            train_windows: 4200,
            train_fraction: 0.6,
            clients: 4,
            signal: SignalParams::default(),
            seed: 0,
        }
    }
}

/// `(non_icing, icing)` counts for `total` windows at `ratio`:1.
pub fn class_split(total: usize, ratio: u32) -> Result<(usize, usize)> {
    if ratio == 0 {
        return Err(Error::Config("imbalance ratio must be at least 1".into()));
    }
    let icing = total / (ratio as usize + 1);
    if icing == 0 {
        return Err(Error::Size(format!("{total} windows at {ratio}:1 leave no icing window")));
    }
    Ok((icing * ratio as usize, icing))
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.window == 0 || self.clients == 0 {
            return Err(Error::Config("channels, window and clients must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train fraction {} outside (0, 1)", self.train_fraction)));
        }
        if self.signal.signature_channels == 0 || self.signal.signature_channels > self.channels {
            return Err(Error::Config("signature channel count out of range".into()));
        }
        self.train_counts()?;
        self.test_counts()?;
        Ok(())
    }

    pub fn train_counts(&self) -> Result<(usize, usize)> {
        class_split(self.train_windows, self.train_ratio)
    }

    /// Test size follows the train/test fraction; the ratio is `test_ratio`.
    pub fn test_counts(&self) -> Result<(usize, usize)> {
        let total = (self.train_windows as f64 * (1.0 - self.train_fraction) / self.train_fraction).round() as usize;
        class_split(total, self.test_ratio)
    }
}

struct SharedProcess {
    ar: Vec<f64>,
    /// Lower-triangular mixing, row-normalized to unit output variance.
    mixing: Vec<f64>,
    signature_sign: Vec<f64>,
}

struct ClientShift {
    offset: Vec<f64>,
    scale: Vec<f64>,
    signature: Vec<usize>,
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn shared_process(spec: &DatasetSpec) -> SharedProcess {
    let d = spec.channels;
    let mut r = rng::stream(spec.seed, &[rng::TAG_DATA, u64::MAX]);
    let (lo, hi) = spec.signal.ar_range;
    let ar = (0..d).map(|_| r.random_range(lo..=hi)).collect();
    let mut mixing = vec![0.0; d * d];
    for i in 0..d {
        mixing[i * d + i] = 1.0;
        for j in 0..i {
            mixing[i * d + j] = spec.signal.mixing * normal(&mut r);
        }
        let n = mixing[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
        mixing[i * d..(i + 1) * d].iter_mut().for_each(|v| *v /= n);
    }
    let signature_sign = (0..spec.signal.signature_channels)
        .map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    SharedProcess { ar, mixing, signature_sign }
}

fn client_shift(spec: &DatasetSpec, client: usize) -> ClientShift {
    let d = spec.channels;
    let mut r = rng::stream(spec.seed, &[rng::TAG_DATA, client as u64, 1]);
    let s = &spec.signal;
    ClientShift {
        offset: (0..d).map(|_| s.client_offset_sd * normal(&mut r)).collect(),
        scale: (0..d).map(|_| (s.client_log_scale_sd * normal(&mut r)).exp()).collect(),
        signature: (0..s.signature_channels).map(|i| (i * 2 + client * s.rotation_step) % d).collect(),
    }
}

fn make_window(
    spec: &DatasetSpec,
    proc_: &SharedProcess,
    shift: &ClientShift,
    icing: bool,
    r: &mut Rng,
) -> Vec<f64> {
    let (t_len, d) = (spec.window, spec.channels);
    let s = &spec.signal;
    let mut z: Vec<f64> = proc_.ar.iter().map(|a| normal(r) / (1.0 - a * a).sqrt()).collect();
    let (onset, ramp, amp) = if icing {
        let onset = r.random_range(0..t_len.div_ceil(2));
        let ramp = (t_len / 4).max(1);
        (onset, ramp, s.shift * r.random_range(0.5..1.5))
    } else {
        (t_len, 1, 0.0)
    };
    let mut out = vec![0.0; t_len * d];
    let mut mixed = vec![0.0; d];
    for t in 0..t_len {
        if t > 0 {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = proc_.ar[c] * *zc + normal(r);
            }
        }
        for (mi, row) in mixed.iter_mut().zip(proc_.mixing.chunks_exact(d)) {
            // stationary variance of z_c is 1/(1-a²); rescale to unit
            *mi = row
                .iter()
                .zip(&z)
                .zip(&proc_.ar)
                .map(|((m, zc), a)| m * zc * (1.0 - a * a).sqrt())
                .sum();
        }
        let level = if t >= onset { ((t - onset + 1) as f64 / ramp as f64).min(1.0) } else { 0.0 };
        for (k, &c) in shift.signature.iter().enumerate() {
            if level > 0.0 {
                let damp = 1.0 + (s.variance_factor - 1.0) * level;
                mixed[c] = mixed[c] * damp + proc_.signature_sign[k] * amp * level;
            }
        }
        for c in 0..d {
            out[t * d + c] = shift.offset[c] + shift.scale[c] * mixed[c];
        }
    }
    out
}

fn generate_set(
    spec: &DatasetSpec,
    proc_: &SharedProcess,
    shift: &ClientShift,
    client: usize,
    split_tag: u64,
    (n0, n1): (usize, usize),
) -> Result<Dataset> {
    let mut r = rng::stream(spec.seed, &[rng::TAG_DATA, client as u64, split_tag]);
    // interleave icing windows at random positions
    let mut labels = vec![0u8; n0 + n1];
    labels[n0..].iter_mut().for_each(|l| *l = 1);
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut r);
    let mut ds = Dataset::new(spec.window, spec.channels);
    for &label in &labels {
        let values = make_window(spec, proc_, shift, label == 1, &mut r);
        ds.push(WindowSample { values, label, turbine_id: client as u32 })?;
    }
    Ok(ds)
}

/// Train and test sets for one client.
pub fn generate_client(spec: &DatasetSpec, client: usize) -> Result<ClientData> {
    spec.validate()?;
    let proc_ = shared_process(spec);
    let shift = client_shift(spec, client);
    Ok(ClientData {
        client_id: client as u32,
        train: generate_set(spec, &proc_, &shift, client, 2, spec.train_counts()?)?,
        test: generate_set(spec, &proc_, &shift, client, 3, spec.test_counts()?)?,
    })
}

/// All clients' datasets. Output is identical for either execution mode.
pub fn generate_synthetic(spec: &DatasetSpec, exec: Execution) -> Result<Vec<ClientData>> {
    spec.validate()?;
    exec.map_range(spec.clients, |k| generate_client(spec, k)).into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientManifest {
    pub client_id: u32,
    pub train_non_icing: u64,
    pub train_icing: u64,
    pub test_non_icing: u64,
    pub test_icing: u64,
}

/// Counts, spec and seed of a generated corpus, written next to CSV exports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub clients: Vec<ClientManifest>,
}

impl DatasetManifest {
    pub fn describe(spec: &DatasetSpec, data: &[ClientData]) -> Self {
        DatasetManifest {
            spec: spec.clone(),
            seed: spec.seed,
            clients: data
                .iter()
                .map(|c| {
                    let (tr, te) = (c.train.counts(), c.test.counts());
                    ClientManifest {
                        client_id: c.client_id,
                        train_non_icing: tr.n0,
                        train_icing: tr.n1,
                        test_non_icing: te.n0,
                        test_icing: te.n1,
                    }
                })
                .collect(),
        }
    }
}
