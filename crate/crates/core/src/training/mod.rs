//! Two-step training of the disentangled codec, the decoder fine-tune and
//! the adversarially trained baseline.
//!
//! Everything here is sequential over optimisation steps and deterministic
//! given the configured seed.

mod adversarial;
mod dib;

pub use adversarial::{train_adversarial_baseline, AdversarialConfig, AdversarialModel};
pub use dib::{finetune_decoder, train_stage1, train_stage2};

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{sequential_batches, ImageSet};
use crate::error::{Error, Result};
use crate::nn::{accuracy, fit_classifier, ClassifierConfig, ModelBundle, Stage};
use crate::objectives::LossReport;

/// Epoch counts of the three DIB stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEpochs {
    pub stage1: usize,
    pub stage2: usize,
    pub finetune: usize,
}

/// Adam learning rates per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub phi_t: f64,
    pub phi_s: f64,
    pub theta_b: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl LearningRates {
    pub fn uniform(lr: f64) -> Self {
        LearningRates {
            phi_t: lr,
            phi_s: lr,
            theta_b: lr,
            gamma: lr,
            epsilon: lr,
        }
    }
}

/// Settings of the disentangled training pipeline.
///
/// Only Bob's SNR is a parameter: the pipeline has no notion of the
/// eavesdropper's channel, and the schema rejects any attempt to add one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the I(y_t; y_s) estimate in the second step.
    pub alpha: f64,
    /// Weight of the private-information bound in the first step.
    pub beta: f64,
    pub snr_ab_db: f64,
    pub epochs: StageEpochs,
    /// Discriminator updates per encoder/decoder update.
    pub discriminator_steps: usize,
    pub batch_size: usize,
    pub learning_rates: LearningRates,
    /// Set from the experiment's global seed when loaded from a file.
    #[serde(default)]
    pub seed: u64,
    pub m_t: usize,
    pub m_s: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 1.0,
            snr_ab_db: 10.0,
            epochs: StageEpochs {
                stage1: 10,
                stage2: 30,
                finetune: 5,
            },
            discriminator_steps: 1,
            batch_size: 64,
            learning_rates: LearningRates::uniform(1e-3),
            seed: 0,
            m_t: 48,
            m_s: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and >= 0");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and > 0");
        }
        if !self.snr_ab_db.is_finite() {
            return bad("snr_ab_db must be finite");
        }
        let e = self.epochs;
        if e.stage1 == 0 || e.stage2 == 0 || e.finetune == 0 {
            return bad("every stage needs at least one epoch");
        }
        if self.discriminator_steps == 0 {
            return bad("discriminator_steps must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        let lr = self.learning_rates;
        if [lr.phi_t, lr.phi_s, lr.theta_b, lr.gamma, lr.epsilon]
            .iter()
            .any(|v| !(*v > 0.0 && v.is_finite()))
        {
            return bad("learning rates must be positive");
        }
        if self.m_t == 0 || self.m_s == 0 {
            return bad("m_t and m_s must be positive");
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogEvent {
    StageStart {
        stage: String,
    },
    Step {
        stage: String,
        epoch: usize,
        step: usize,
        report: LossReport,
    },
    Epoch {
        stage: String,
        epoch: usize,
        metrics: BTreeMap<String, f64>,
    },
    StageEnd {
        stage: String,
        checksums: BTreeMap<String, String>,
        summary: BTreeMap<String, f64>,
    },
}

impl LogEvent {
    pub fn stage(&self) -> &str {
        match self {
            LogEvent::StageStart { stage }
            | LogEvent::Step { stage, .. }
            | LogEvent::Epoch { stage, .. }
            | LogEvent::StageEnd { stage, .. } => stage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Milliseconds since the Unix epoch when the record was written.
    pub unix_ms: u128,
    #[serde(flatten)]
    pub event: LogEvent,
}

/// Append-only training log, kept in memory and optionally mirrored to a
/// line-delimited JSON file.
#[derive(Debug, Default)]
pub struct TrainingLog {
    records: Vec<LogRecord>,
    sink: Option<(PathBuf, File)>,
}

fn stage_rank(stage: &str) -> usize {
    match stage {
        "stage1" => 1,
        "stage2" => 2,
        "finetune" => 3,
        _ => 0,
    }
}

impl TrainingLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path`, creating it (and its directory) when missing.
    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(Error::io(path))?;
        Ok(TrainingLog {
            records: Vec::new(),
            sink: Some((path.to_path_buf(), file)),
        })
    }

    /// Reads a log file written by [`TrainingLog::to_file`].
    pub fn read(path: &Path) -> Result<Vec<LogRecord>> {
        let file = File::open(path).map_err(Error::io(path))?;
        BufReader::new(file)
            .lines()
            .map(|line| {
                let line = line.map_err(Error::io(path))?;
                serde_json::from_str(&line).map_err(|e| Error::format(path, e.to_string()))
            })
            .collect()
    }

    pub fn push(&mut self, event: LogEvent) -> Result<()> {
        if let LogEvent::StageStart { stage } = &event {
            let last = self.records.last().map(|r| stage_rank(r.event.stage())).unwrap_or(0);
            let rank = stage_rank(stage);
            if rank > 0 && rank < last {
                return Err(Error::Precondition(format!(
                    "stage {stage} logged after a later stage"
                )));
            }
        }
        let record = LogRecord {
            unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
            event,
        };
        if let Some((path, file)) = &mut self.sink {
            let line = serde_json::to_string(&record).expect("log records serialize");
            writeln!(file, "{line}").map_err(Error::io(path.as_path()))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    /// The records with wall-clock timestamps removed; two runs with the
    /// same configuration and seed produce identical event streams.
    pub fn events(&self) -> Vec<LogEvent> {
        self.records.iter().map(|r| r.event.clone()).collect()
    }

    /// Metrics of the last epoch record of `stage`.
    pub fn last_epoch_metrics(&self, stage: &str) -> Option<&BTreeMap<String, f64>> {
        self.records.iter().rev().find_map(|r| match &r.event {
            LogEvent::Epoch { stage: s, metrics, .. } if s == stage => Some(metrics),
            _ => None,
        })
    }

    pub fn stage_summary(&self, stage: &str) -> Option<&BTreeMap<String, f64>> {
        self.records.iter().rev().find_map(|r| match &r.event {
            LogEvent::StageEnd { stage: s, summary, .. } if s == stage => Some(summary),
            _ => None,
        })
    }
}

/// Where stage checkpoints go. One file per stage, overwritten at the end
/// of every epoch.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    /// Provenance copied into every checkpoint header.
    pub metadata: BTreeMap<String, String>,
}

impl CheckpointSink {
    pub fn new(dir: impl Into<PathBuf>, metadata: BTreeMap<String, String>) -> Self {
        CheckpointSink {
            dir: dir.into(),
            metadata,
        }
    }

    pub fn bundle_path(dir: &Path, stage: Stage) -> PathBuf {
        dir.join(format!("bundle-{stage}.safetensors"))
    }

    pub fn baseline_path(dir: &Path, snr_ae_train_db: f64) -> PathBuf {
        dir.join(format!("adversarial-snr{snr_ae_train_db}.safetensors"))
    }

    pub fn save_bundle(&self, bundle: &ModelBundle) -> Result<PathBuf> {
        let path = Self::bundle_path(&self.dir, bundle.stage());
        bundle.save(&path, &self.metadata)?;
        Ok(path)
    }

    fn save_diagnostic(&self, bundle: &ModelBundle, stage: Stage) -> Option<PathBuf> {
        let path = self.dir.join(format!("diagnostic-{stage}.safetensors"));
        bundle.save(&path, &self.metadata).ok().map(|_| path)
    }
}

/// Exclusive claim on a run directory; released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Precondition(
                format!(
                    "{} is locked by another run (remove {} if stale)",
                    dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(Error::Io { path, source: e }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Fails with a numeric error (after writing a diagnostic snapshot when a
/// sink is configured) if `value` is not finite.
pub(crate) fn guard_finite(
    value: f64,
    what: &str,
    bundle: &ModelBundle,
    stage: Stage,
    sink: Option<&CheckpointSink>,
) -> Result<()> {
    if value.is_finite() {
        return Ok(());
    }
    let snapshot = sink
        .and_then(|s| s.save_diagnostic(bundle, stage))
        .map(|p| format!("; parameters saved to {}", p.display()))
        .unwrap_or_default();
    Err(Error::Numeric(format!("{what} became {value} during {stage}{snapshot}")))
}

/// Accuracy of a linear probe predicting `labels` from `features`, fitted
/// on the first half of the rows and scored on the second half. Used as
/// the per-epoch collapse monitor.
pub fn monitor_probe(features: &Tensor, labels: &[u32], classes: usize, seed: u64) -> Result<f64> {
    let n = features.dim(0)?;
    let half = n / 2;
    if half < 2 {
        return Err(Error::Input("monitor probe needs at least four rows".into()));
    }
    let cfg = ClassifierConfig {
        hidden: 0,
        epochs: 10,
        batch_size: 64,
        learning_rate: 1e-2,
    };
    let probe = fit_classifier(&features.narrow(0, 0, half)?, &labels[..half], classes, 0.0, &cfg, seed)?;
    accuracy(&probe.predict(&features.narrow(0, half, n - half)?)?, &labels[half..])
}

/// Applies `f` to consecutive batches of `data` and concatenates the rows.
pub(crate) fn map_batches(
    data: &ImageSet,
    batch_size: usize,
    mut f: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let mut parts = Vec::new();
    for batch in sequential_batches(data.len(), batch_size) {
        parts.push(f(&data.batch_tensor(&batch, &Device::Cpu)?)?.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}
