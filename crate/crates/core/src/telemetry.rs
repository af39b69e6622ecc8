//! Training telemetry: oscillation series, latent-weight histograms and
//! loss curves, with CSV and JSON export.
//!
//! CSV columns (one row per epoch and binary layer):
//! `epoch,layer,flip_proportion,sequential_ratio,gamma_mean,alpha_mean,near_zero_fraction,train_loss`
//!
//! JSON carries `"schema_version": 1`. The first line of the JSON file holds
//! the schema version, run id and creation time; every later line is a
//! deterministic function of the run.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::binarize::BinaryLayer;
use crate::rebnn::OscillationRecord;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const HISTOGRAM_BINS: usize = 64;
pub const HISTOGRAM_RANGE: (f64, f64) = (-1.5, 1.5);
pub const CSV_HEADER: &str =
    "epoch,layer,flip_proportion,sequential_ratio,gamma_mean,alpha_mean,near_zero_fraction,train_loss";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub task_loss: f64,
    pub reconstruction_loss: f64,
    pub lr: f64,
    pub oscillation: Vec<OscillationRecord>,
}

/// Epoch aggregate for one binary layer. Ratios are exact count ratios
/// over every iteration of the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLayerRecord {
    pub layer: usize,
    pub flip_count: u64,
    pub sequential_count: u64,
    pub weight_count: u64,
    pub flip_proportion: f64,
    pub sequential_ratio: f64,
    pub gamma_mean: f64,
    pub alpha_mean: f64,
    pub near_zero_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub reconstruction_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub layers: Vec<EpochLayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRecord {
    pub epoch: usize,
    pub layer: usize,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub layer: usize,
    pub name: String,
    pub weight_count: usize,
}

/// Receives records from the single training thread.
pub trait TelemetrySink {
    fn record_iteration(&mut self, record: IterationRecord);
    fn record_epoch(&mut self, record: EpochRecord);
    fn record_histogram(&mut self, record: HistogramRecord);
}

/// Discards everything.
pub struct NullSink;

impl TelemetrySink for NullSink {
    fn record_iteration(&mut self, _: IterationRecord) {}
    fn record_epoch(&mut self, _: EpochRecord) {}
    fn record_histogram(&mut self, _: HistogramRecord) {}
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub schema_version: u32,
    pub run_id: String,
    pub created_unix_ms: u64,
    pub config: serde_json::Value,
    pub layers: Vec<LayerInfo>,
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
    pub histograms: Vec<HistogramRecord>,
}

impl TelemetrySink for RunLog {
    fn record_iteration(&mut self, record: IterationRecord) {
        debug_assert!(self
            .iterations
            .last()
            .is_none_or(|l| (l.epoch, l.iteration) < (record.epoch, record.iteration)));
        self.iterations.push(record);
    }

    fn record_epoch(&mut self, record: EpochRecord) {
        self.epochs.push(record);
    }

    fn record_histogram(&mut self, record: HistogramRecord) {
        self.histograms.push(record);
    }
}

impl RunLog {
    pub fn new(run_id: impl Into<String>, config: serde_json::Value, layers: Vec<LayerInfo>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            run_id: run_id.into(),
            created_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            config,
            layers,
            iterations: Vec::new(),
            epochs: Vec::new(),
            histograms: Vec::new(),
        }
    }

    /// Per-epoch series of one layer's sequential oscillation ratio.
    pub fn sequential_series(&self, layer: usize) -> Vec<f64> {
        self.epochs
            .iter()
            .filter_map(|e| e.layers.iter().find(|l| l.layer == layer))
            .map(|l| l.sequential_ratio)
            .collect()
    }

    /// Per-epoch sequential ratio pooled over all binary layers (count-weighted).
    pub fn pooled_sequential_series(&self) -> Vec<f64> {
        self.epochs
            .iter()
            .map(|e| {
                let seq: u64 = e.layers.iter().map(|l| l.sequential_count).sum();
                let n: u64 = e.layers.iter().map(|l| l.weight_count).sum();
                if n == 0 {
                    0.0
                } else {
                    seq as f64 / n as f64
                }
            })
            .collect()
    }

    /// CSV rendering; one row per `(epoch, layer)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            for l in &e.layers {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    e.epoch,
                    l.layer,
                    l.flip_proportion,
                    l.sequential_ratio,
                    l.gamma_mean,
                    l.alpha_mean,
                    l.near_zero_fraction,
                    e.train_loss
                ));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let mut out = format!(
            "{{\"schema_version\":{},\"run_id\":{},\"created_unix_ms\":{},\n",
            self.schema_version,
            serde_json::to_string(&self.run_id)?,
            self.created_unix_ms
        );
        out.push_str(&format!("\"config\":{},\n", serde_json::to_string(&self.config)?));
        out.push_str(&format!("\"layers\":{},\n", serde_json::to_string(&self.layers)?));
        out.push_str(&format!(
            "\"iterations\":{},\n",
            serde_json::to_string(&self.iterations)?
        ));
        out.push_str(&format!("\"epochs\":{},\n", serde_json::to_string(&self.epochs)?));
        out.push_str(&format!(
            "\"histograms\":{}}}\n",
            serde_json::to_string(&self.histograms)?
        ));
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let log: RunLog = serde_json::from_str(text)?;
        if log.schema_version != SCHEMA_VERSION {
            return Err(Error::Version {
                found: log.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        Ok(log)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn export_csv(log: &RunLog, path: &Path) -> Result<()> {
    write_file(path, &log.to_csv())
}

pub fn export_json(log: &RunLog, path: &Path) -> Result<()> {
    write_file(path, &log.to_json()?)
}

pub fn import_json(path: &Path) -> Result<RunLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    RunLog::from_json(&text)
}

/// 64-bin histogram of latent weights over `[-1.5, 1.5]`. Values outside the
/// range land in the edge bins so counts always sum to the weight count.
pub fn snapshot_histogram(layer: &BinaryLayer, layer_id: usize, epoch: usize) -> HistogramRecord {
    let (lo, hi) = HISTOGRAM_RANGE;
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &w in layer.latent_weight.data() {
        let idx = ((w as f64 - lo) / width).floor();
        let idx = if idx.is_nan() {
            0.0
        } else {
            idx.clamp(0.0, (HISTOGRAM_BINS - 1) as f64)
        };
        counts[idx as usize] += 1;
    }
    HistogramRecord {
        epoch,
        layer: layer_id,
        lo,
        hi,
        counts,
    }
}

/// Fraction of latent weights with `|w| < epsilon`.
pub fn near_zero_fraction(layer: &BinaryLayer, epsilon: f64) -> f64 {
    let data = layer.latent_weight.data();
    let near = data.iter().filter(|w| (w.abs() as f64) < epsilon).count();
    near as f64 / data.len() as f64
}

pub const NEAR_ZERO_EPSILON: f64 = 0.05;

/// Sums iteration counts for one epoch, then closes it against the layers'
/// end-of-epoch state.
#[derive(Debug, Clone, Default)]
pub struct EpochAccumulator {
    flips: Vec<u64>,
    sequential: Vec<u64>,
    weights: Vec<u64>,
    loss_sum: f64,
    recon_sum: f64,
    samples: usize,
}

impl EpochAccumulator {
    pub fn new(binary_layers: usize) -> Self {
        Self {
            flips: vec![0; binary_layers],
            sequential: vec![0; binary_layers],
            weights: vec![0; binary_layers],
            ..Self::default()
        }
    }

    pub fn add(&mut self, record: &IterationRecord, batch_size: usize) {
        for o in &record.oscillation {
            self.flips[o.layer_id] += o.flip_count;
            self.sequential[o.layer_id] += o.sequential_count;
            self.weights[o.layer_id] += o.weight_count;
        }
        self.loss_sum += record.task_loss * batch_size as f64;
        self.recon_sum += record.reconstruction_loss * batch_size as f64;
        self.samples += batch_size;
    }

    pub fn finish<'a>(&self, epoch: usize, layers: impl Iterator<Item = &'a BinaryLayer>) -> EpochRecord {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        let layers = layers
            .enumerate()
            .map(|(i, l)| EpochLayerRecord {
                layer: i,
                flip_count: self.flips[i],
                sequential_count: self.sequential[i],
                weight_count: self.weights[i],
                flip_proportion: ratio(self.flips[i], self.weights[i]),
                sequential_ratio: ratio(self.sequential[i], self.weights[i]),
                gamma_mean: mean(&l.gamma),
                alpha_mean: mean(&l.alpha),
                near_zero_fraction: near_zero_fraction(l, NEAR_ZERO_EPSILON),
            })
            .collect();
        let n = self.samples.max(1) as f64;
        EpochRecord {
            epoch,
            train_loss: self.loss_sum / n,
            reconstruction_loss: self.recon_sum / n,
            eval_accuracy: None,
            layers,
        }
    }
}
