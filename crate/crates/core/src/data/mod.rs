//! Windowed sensor datasets: the in-memory container, the synthetic
//! imbalanced generator, windowing and splitting, and CSV ingestion.

mod csv_io;
mod synthetic;
mod window;

pub use csv_io::{load_csv, read_csv, write_csv, CsvLoadOptions, CsvSchema, RawSeries, ZScore};
pub use synthetic::{class_split, generate_client, generate_synthetic, DatasetManifest, DatasetSpec, SignalParams};
pub use window::{split_train_test, window_slice, LabelRule};

use crate::error::{Error, Result};
use crate::losses::ClassCounts;
use crate::ndkernel::Tensor;

/// One `T×d` window, row-major by time step, with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub values: Vec<f64>,
    pub label: u8,
    pub turbine_id: u32,
}

/// A set of equally shaped windows stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    window: usize,
    channels: usize,
    values: Vec<f64>,
    labels: Vec<u8>,
    turbine_ids: Vec<u32>,
}

impl Dataset {
    pub fn new(window: usize, channels: usize) -> Self {
        Dataset { window, channels, values: Vec::new(), labels: Vec::new(), turbine_ids: Vec::new() }
    }

    pub fn from_samples(window: usize, channels: usize, samples: Vec<WindowSample>) -> Result<Self> {
        let mut d = Dataset::new(window, channels);
        for s in samples {
            d.push(s)?;
        }
        Ok(d)
    }

    pub fn push(&mut self, s: WindowSample) -> Result<()> {
        if s.values.len() != self.window * self.channels {
            return Err(Error::Dimension(format!(
                "window has {} values, dataset expects {}x{}",
                s.values.len(),
                self.window,
                self.channels
            )));
        }
        if s.label > 1 {
            return Err(Error::Config(format!("label {} is not 0 or 1", s.label)));
        }
        if s.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("window contains non-finite values".into()));
        }
        self.values.extend_from_slice(&s.values);
        self.labels.push(s.label);
        self.turbine_ids.push(s.turbine_id);
        Ok(())
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn counts(&self) -> ClassCounts {
        ClassCounts::from_labels(&self.labels)
    }

    pub fn window_values(&self, i: usize) -> &[f64] {
        let w = self.window * self.channels;
        &self.values[i * w..(i + 1) * w]
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn sample(&self, i: usize) -> WindowSample {
        WindowSample {
            values: self.window_values(i).to_vec(),
            label: self.labels[i],
            turbine_id: self.turbine_ids[i],
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = WindowSample> + '_ {
        (0..self.len()).map(|i| self.sample(i))
    }

    /// Gathers `indices` into a `[B, T, d]` tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let w = self.window * self.channels;
        let mut data = Vec::with_capacity(indices.len() * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.window_values(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(&[indices.len(), self.window, self.channels], data).expect("consistent shape");
        (t, labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut d = Dataset::new(self.window, self.channels);
        for &i in indices {
            d.values.extend_from_slice(self.window_values(i));
            d.labels.push(self.labels[i]);
            d.turbine_ids.push(self.turbine_ids[i]);
        }
        d
    }
}

/// A client's train/test pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub client_id: u32,
    pub train: Dataset,
    pub test: Dataset,
}
