//! Config-driven pipeline behind the command-line driver.
//!
//! A run lives in `<output root>/<name>/` with the subdirectories
//! `data/` (dataset cache), `checkpoints/`, `logs/`, `metrics/` and
//! `figures/`. Every artifact carries the configuration hash and the code
//! version.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{
    self, eavesdropping_sweep, probe_disentanglement, reconstruct_set, reconstruction_metrics,
    AttackResult, MetricsRecord, MetricsRow, NoiseCodewords, ProbeTable, TransmitModel,
};
use crate::channel::ChannelSpec;
use crate::config::ExperimentConfig;
use crate::data::{
    load_utkface, read_cache, read_manifest, split_dataset, synthesize_colored_mnist, write_cache,
    DatasetName, GrayscaleDigits, Splits, CACHE_FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::nn::{accuracy, fit_image_classifier, ImageClassifier, ModelBundle, Stage};
use crate::rng;
use crate::training::{
    finetune_decoder, train_adversarial_baseline, train_stage1, train_stage2, AdversarialModel,
    CheckpointSink, RunLock, TrainingLog,
};

/// Directory layout of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub root: PathBuf,
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub logs: PathBuf,
    pub metrics: PathBuf,
    pub figures: PathBuf,
}

impl RunPaths {
    pub fn new(root: PathBuf) -> Self {
        RunPaths {
            data: root.join("data"),
            checkpoints: root.join("checkpoints"),
            logs: root.join("logs"),
            metrics: root.join("metrics"),
            figures: root.join("figures"),
            root,
        }
    }

    fn create(&self) -> Result<()> {
        for dir in [&self.data, &self.checkpoints, &self.logs, &self.metrics, &self.figures] {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        Ok(())
    }
}

/// A validated configuration bound to its run directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub paths: RunPaths,
}

impl Experiment {
    /// Places the run under [`ExperimentConfig::output_root`].
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let root = config.output_root().join(&config.name);
        Self::at(config, root)
    }

    /// Places the run directly in `root`.
    pub fn at(config: ExperimentConfig, root: PathBuf) -> Result<Self> {
        config.validate()?;
        Ok(Experiment {
            config,
            paths: RunPaths::new(root),
        })
    }

    /// `config_hash`, `code_version` and `experiment` entries.
    pub fn provenance(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("config_hash".to_string(), self.config.hash()),
            ("code_version".to_string(), crate::CODE_VERSION.to_string()),
            ("experiment".to_string(), self.config.name.clone()),
        ])
    }

    fn lock(&self) -> Result<RunLock> {
        self.paths.create()?;
        RunLock::acquire(&self.paths.root)
    }
}

// ---------------------------------------------------------------------------
// make-data

/// What [`make_data`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataOutcome {
    Created,
    /// A cache built from the same inputs was already present.
    Unchanged,
    /// A cache built from different inputs was replaced (`--force`).
    Replaced,
}

/// Hash of everything that determines the dataset cache contents.
pub fn dataset_input_hash(config: &ExperimentConfig) -> String {
    let inputs = serde_json::json!({
        "dataset": config.dataset,
        "cache_format": CACHE_FORMAT_VERSION,
    });
    hex::encode(Sha256::digest(inputs.to_string().as_bytes()))
}

fn build_splits(config: &ExperimentConfig) -> Result<Splits> {
    let section = &config.dataset;
    let spec = section.spec();
    let images = match section.name {
        DatasetName::ColoredMnist => {
            let mut digits = GrayscaleDigits::bundled()?;
            if let Some(limit) = section.limit {
                digits = digits.head(limit);
            }
            synthesize_colored_mnist(&digits, &section.palette, section.seed)?
        }
        DatasetName::Utkface => {
            let dir = section
                .source_dir
                .as_ref()
                .ok_or_else(|| Error::Config("utkface needs dataset.source_dir".into()))?;
            let loaded = load_utkface(dir, spec.shape)?;
            if loaded.skipped > 0 {
                log::warn!("skipped {} unparseable UTK Face files", loaded.skipped);
            }
            match section.limit {
                Some(limit) => loaded.images.head(limit),
                None => loaded.images,
            }
        }
    };
    split_dataset(&images, &spec)
}

/// Builds the dataset cache. An existing cache with the same input hash is
/// left alone; one with a different hash is only replaced with `force`.
pub fn make_data(exp: &Experiment, force: bool) -> Result<DataOutcome> {
    let _lock = exp.lock()?;
    let hash = dataset_input_hash(&exp.config);
    let dir = &exp.paths.data;
    let existing = dir.join("manifest.json").exists();
    if existing && !force {
        let manifest = read_manifest(dir)?;
        if manifest.input_hash != hash {
            return Err(Error::Precondition(format!(
                "the dataset cache in {} was built from different inputs \
                 (hash {} vs {}); rerun with --force to replace it",
                dir.display(),
                &manifest.input_hash[..12],
                &hash[..12]
            )));
        }
        read_cache(dir)?;
        log::info!("dataset cache {} is up to date", dir.display());
        return Ok(DataOutcome::Unchanged);
    }
    let splits = build_splits(&exp.config)?;
    let manifest = write_cache(dir, exp.config.dataset.name, &splits, &hash)?;
    log::info!("wrote dataset cache {} with {:?}", dir.display(), manifest.counts);
    Ok(if existing {
        DataOutcome::Replaced
    } else {
        DataOutcome::Created
    })
}

/// The cached splits, checked against the current configuration.
pub fn load_splits(exp: &Experiment) -> Result<Splits> {
    let dir = &exp.paths.data;
    if !dir.join("manifest.json").exists() {
        return Err(Error::Precondition(format!(
            "no dataset cache in {}; run make-data first",
            dir.display()
        )));
    }
    let (manifest, splits) = read_cache(dir)?;
    if manifest.input_hash != dataset_input_hash(&exp.config) {
        return Err(Error::Precondition(format!(
            "the dataset cache in {} does not match the configuration; run make-data --force",
            dir.display()
        )));
    }
    Ok(splits)
}

// ---------------------------------------------------------------------------
// train

/// Which part of the training pipeline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelector {
    /// Stage 1, stage 2, finetune, then the baselines (when enabled).
    All,
    Stage1,
    Stage2,
    Finetune,
    Baseline,
}

impl StageSelector {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => StageSelector::All,
            "stage1" => StageSelector::Stage1,
            "stage2" => StageSelector::Stage2,
            "finetune" => StageSelector::Finetune,
            "baseline" => StageSelector::Baseline,
            other => {
                return Err(Error::Config(format!(
                    "unknown stage {other:?}; expected all, stage1, stage2, finetune or baseline"
                )))
            }
        })
    }

    fn dib_stages(self) -> &'static [Stage] {
        match self {
            StageSelector::All => &[Stage::Stage1, Stage::Stage2, Stage::Finetune],
            StageSelector::Stage1 => &[Stage::Stage1],
            StageSelector::Stage2 => &[Stage::Stage2],
            StageSelector::Finetune => &[Stage::Finetune],
            StageSelector::Baseline => &[],
        }
    }
}

impl fmt::Display for StageSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageSelector::All => "all",
            StageSelector::Stage1 => "stage1",
            StageSelector::Stage2 => "stage2",
            StageSelector::Finetune => "finetune",
            StageSelector::Baseline => "baseline",
        })
    }
}

fn previous_stage(stage: Stage) -> Option<Stage> {
    match stage {
        Stage::Initialized | Stage::Stage1 => None,
        Stage::Stage2 => Some(Stage::Stage1),
        Stage::Finetune => Some(Stage::Stage2),
    }
}

const LATER_STAGES: [Stage; 3] = [Stage::Stage1, Stage::Stage2, Stage::Finetune];

/// Checkpoints written by [`train`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
}

fn fresh_log(path: &Path) -> Result<TrainingLog> {
    if path.exists() {
        std::fs::remove_file(path).map_err(Error::io(path))?;
    }
    TrainingLog::to_file(path)
}

/// Loads the checkpoint written at the end of `stage`.
pub fn load_stage(exp: &Experiment, stage: Stage) -> Result<ModelBundle> {
    let path = CheckpointSink::bundle_path(&exp.paths.checkpoints, stage);
    if !path.exists() {
        return Err(Error::Precondition(format!(
            "missing {stage} checkpoint {}; run `train --stage {stage}` first",
            path.display()
        )));
    }
    let (bundle, _) = ModelBundle::load(&path, Some(&exp.config.architecture()))?;
    if bundle.stage() != stage {
        return Err(Error::Precondition(format!(
            "{} holds a {} model, expected {stage}",
            path.display(),
            bundle.stage()
        )));
    }
    Ok(bundle)
}

/// Runs the selected training stages, writing one checkpoint per DIB stage
/// and one per baseline SNR.
pub fn train(exp: &Experiment, selector: StageSelector) -> Result<TrainOutcome> {
    let _lock = exp.lock()?;
    let config = &exp.config;
    if selector == StageSelector::Baseline && !config.baseline.enabled {
        return Err(Error::Precondition("the configuration has no enabled [baseline]".into()));
    }
    let stages = selector.dib_stages();
    // Fail on a missing prerequisite before touching the data.
    let mut bundle = match stages.first().copied().and_then(previous_stage) {
        Some(prev) => Some(load_stage(exp, prev)?),
        None => None,
    };
    let splits = load_splits(exp)?;
    let sink = CheckpointSink::new(exp.paths.checkpoints.clone(), exp.provenance());
    let mut outcome = TrainOutcome::default();
    for &stage in stages {
        // Checkpoints of later stages would be stale after a rerun.
        for later in LATER_STAGES.iter().filter(|s| **s > stage) {
            let path = CheckpointSink::bundle_path(&exp.paths.checkpoints, *later);
            if path.exists() {
                std::fs::remove_file(&path).map_err(Error::io(&path))?;
            }
        }
        let mut log = fresh_log(&exp.paths.logs.join(format!("{stage}.jsonl")))?;
        let model = match bundle.as_mut() {
            Some(b) => b,
            None => bundle.insert(ModelBundle::new(
                config.architecture(),
                rng::derive(config.seed, "init"),
            )?),
        };
        log::info!("training {stage}");
        match stage {
            Stage::Stage1 => train_stage1(model, &splits.train, &splits.validation, &config.train, &mut log, Some(&sink))?,
            Stage::Stage2 => train_stage2(model, &splits.train, &splits.validation, &config.train, &mut log, Some(&sink))?,
            Stage::Finetune => finetune_decoder(model, &splits.train, &splits.validation, &config.train, &mut log, Some(&sink))?,
            Stage::Initialized => unreachable!("not a training stage"),
        }
        outcome.checkpoints.push(sink.save_bundle(model)?);
    }
    if matches!(selector, StageSelector::All | StageSelector::Baseline) && config.baseline.enabled {
        for &snr in &config.baseline.snr_ae_train_db {
            let path = CheckpointSink::baseline_path(&exp.paths.checkpoints, snr);
            let mut log = fresh_log(&exp.paths.logs.join(format!("baseline-snr{snr}.jsonl")))?;
            log::info!("training the adversarial baseline for an eavesdropper at {snr} dB");
            let meta = exp.provenance();
            train_adversarial_baseline(
                &splits.train,
                &splits.validation,
                &config.architecture(),
                snr,
                &config.adversarial_config(snr),
                &mut log,
                Some((&path, &meta)),
            )?;
            outcome.checkpoints.push(path);
        }
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// evaluate

/// Identifier of the DIB model in metrics and `--models`.
pub const DIB_MODEL_ID: &str = "dib";

/// Identifier of the baseline trained against an eavesdropper at `snr`.
pub fn baseline_model_id(snr: f64) -> String {
    format!("adv@{snr}dB")
}

/// Evaluation of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub record: MetricsRecord,
    /// Accuracy of a public-label classifier (trained on clean images) on
    /// the model's reconstructions at Bob's SNR.
    pub public_accuracy_on_reconstructions: f64,
    pub image_grid: PathBuf,
}

/// The JSON summary written next to the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub config_hash: String,
    pub code_version: String,
    pub snr_ab_db: f64,
    pub chance_accuracy: f64,
    pub constant_predictor_mse: f64,
    pub public_accuracy_on_clean: f64,
    pub models: Vec<ModelEvaluation>,
    /// Eavesdropper against seeded noise codewords (no information).
    pub noise_control: Vec<AttackResult>,
    pub probes: Option<ProbeTable>,
    pub embeddings: Option<[PathBuf; 2]>,
    pub metrics_csv: PathBuf,
    pub plot: PathBuf,
}

impl EvaluationSummary {
    pub fn model(&self, id: &str) -> Option<&ModelEvaluation> {
        self.models.iter().find(|m| m.record.model_id == id)
    }
}

enum Loaded {
    Dib(ModelBundle),
    Baseline(AdversarialModel),
}

impl Loaded {
    fn model(&self) -> &dyn TransmitModel {
        match self {
            Loaded::Dib(b) => b,
            Loaded::Baseline(m) => m,
        }
    }
}

/// Model ids evaluated by default: the DIB model plus every enabled baseline.
pub fn default_model_ids(config: &ExperimentConfig) -> Vec<String> {
    let mut ids = vec![DIB_MODEL_ID.to_string()];
    if config.baseline.enabled {
        ids.extend(config.baseline.snr_ae_train_db.iter().map(|s| baseline_model_id(*s)));
    }
    ids
}

fn load_model(exp: &Experiment, id: &str) -> Result<Loaded> {
    if id == DIB_MODEL_ID {
        return Ok(Loaded::Dib(load_stage(exp, Stage::Finetune)?));
    }
    let snr = exp
        .config
        .baseline
        .snr_ae_train_db
        .iter()
        .copied()
        .find(|s| baseline_model_id(*s) == id)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown model {id:?}; known: {}",
                default_model_ids(&exp.config).join(", ")
            ))
        })?;
    let path = CheckpointSink::baseline_path(&exp.paths.checkpoints, snr);
    if !path.exists() {
        return Err(Error::Precondition(format!(
            "missing baseline checkpoint {}; run `train --stage baseline` first",
            path.display()
        )));
    }
    let (model, _) = AdversarialModel::load(&path, Some(&exp.config.architecture()))?;
    Ok(Loaded::Baseline(model))
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn public_accuracy(classifier: &ImageClassifier, images: &Tensor, labels: &[u32]) -> Result<f64> {
    let mut predicted = Vec::with_capacity(labels.len());
    let n = images.dim(0)?;
    let mut start = 0;
    while start < n {
        let len = 500.min(n - start);
        predicted.extend(classifier.predict(&images.narrow(0, start, len)?)?);
        start += len;
    }
    accuracy(&predicted, labels)
}

/// Attack sweeps, reconstruction metrics, probes, embeddings, the metrics
/// table, the JSON summary, the accuracy plot and one image grid per model.
///
/// `models` defaults to [`default_model_ids`].
pub fn evaluate(exp: &Experiment, models: Option<&[String]>) -> Result<EvaluationSummary> {
    let config = &exp.config;
    let ids: Vec<String> = match models {
        Some(ids) if !ids.is_empty() => ids.to_vec(),
        _ => default_model_ids(config),
    };
    let loaded: Vec<Loaded> = ids.iter().map(|id| load_model(exp, id)).collect::<Result<_>>()?;
    let _lock = exp.lock()?;
    let splits = load_splits(exp)?;
    let (train, test) = (&splits.train, &splits.test);
    let provenance = exp.provenance();
    let seed = config.seed;
    let grid = &config.attack.snr_grid;
    let bob = ChannelSpec::new(config.train.snr_ab_db, rng::derive(seed, "bob-evaluation"))?;

    let public_labels = test.public_labels(&test.all_indices());
    let originals = attack::images_tensor(test)?;
    let public_classifier = fit_image_classifier(
        train,
        &config.attack.public_classifier,
        rng::derive(seed, "public-classifier"),
    )?;
    let public_accuracy_on_clean = public_accuracy(&public_classifier, &originals, &public_labels)?;

    let mut evaluations = Vec::new();
    let mut rows = Vec::new();
    let mut probes = None;
    let mut embeddings = None;
    for (id, model) in ids.iter().zip(&loaded) {
        log::info!("evaluating {id}");
        let transmit = model.model();
        let mut record = reconstruction_metrics(transmit, test, &bob)?;
        record.attacks = eavesdropping_sweep(
            transmit,
            train,
            test,
            grid,
            &config.attack.eavesdropper,
            rng::derive(seed, &format!("sweep/{id}")),
        )?;
        let reconstructions = reconstruct_set(transmit, test, &bob)?;
        let public_accuracy_on_reconstructions =
            public_accuracy(&public_classifier, &reconstructions, &public_labels)?;
        let image_grid = exp.paths.figures.join(format!("reconstructions-{}.png", file_safe(id)));
        attack::write_image_grid(
            &image_grid,
            &originals,
            &reconstructions,
            config.attack.grid_columns,
            &provenance,
        )?;
        if let Loaded::Dib(bundle) = model {
            probes = Some(probe_disentanglement(
                bundle,
                train,
                test,
                &config.attack.probe,
                rng::derive(seed, "probes"),
            )?);
            let (t, s) = attack::export_embeddings(bundle, test, &exp.paths.metrics.join("embeddings"))?;
            embeddings = Some([t, s]);
        }
        rows.extend(record.attacks.iter().map(|a| MetricsRow {
            model: id.clone(),
            snr_ae_db: a.snr_ae_db,
            accuracy: a.eavesdrop_accuracy,
            n_test: a.n_test,
            config_hash: provenance["config_hash"].clone(),
            code_version: provenance["code_version"].clone(),
        }));
        evaluations.push(ModelEvaluation {
            record,
            public_accuracy_on_reconstructions,
            image_grid,
        });
    }

    let arch = config.architecture();
    let noise = NoiseCodewords {
        shape: arch.image,
        len: arch.m(),
        seed: rng::derive(seed, "noise-control"),
    };
    let noise_control = eavesdropping_sweep(
        &noise,
        train,
        test,
        grid,
        &config.attack.eavesdropper,
        rng::derive(seed, "sweep/noise"),
    )?;

    let metrics_csv = exp.paths.metrics.join("metrics.csv");
    attack::write_metrics_csv(&metrics_csv, &rows)?;
    let plot = exp.paths.figures.join("eavesdropping_accuracy.svg");
    let curves: Vec<(String, Vec<(f64, f64)>)> = evaluations
        .iter()
        .map(|e| {
            (
                e.record.model_id.clone(),
                e.record.attacks.iter().map(|a| (a.snr_ae_db, a.eavesdrop_accuracy)).collect(),
            )
        })
        .collect();
    let chance = 1.0 / train.private_categories() as f64;
    attack::write_accuracy_plot(&plot, &curves, Some(chance), &provenance)?;

    let summary = EvaluationSummary {
        config_hash: provenance["config_hash"].clone(),
        code_version: provenance["code_version"].clone(),
        snr_ab_db: bob.snr_db,
        chance_accuracy: chance,
        constant_predictor_mse: test.constant_predictor_mse(),
        public_accuracy_on_clean,
        models: evaluations,
        noise_control,
        probes,
        embeddings,
        metrics_csv,
        plot,
    };
    let path = exp.paths.metrics.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&path, json).map_err(Error::io(&path))?;
    Ok(summary)
}
