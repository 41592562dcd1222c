//! Experiment configuration files (TOML).
//!
//! One file describes one experiment. Unknown keys are rejected in every
//! section. Seeds of the training sections are derived from the top-level
//! `seed`, so a single `--seed` override re-seeds the whole run without
//! touching the dataset (which has its own `dataset.seed`).
//!
//! ```toml
//! name = "desk"
//! seed = 1
//!
//! [dataset]
//! name = "colored_mnist"
//! seed = 1
//!
//! [train]
//! alpha = 1.0
//! beta = 1.0
//! snr_ab_db = 10.0
//! discriminator_steps = 1
//! batch_size = 64
//! m_t = 48
//! m_s = 16
//! epochs = { stage1 = 3, stage2 = 12, finetune = 3 }
//! learning_rates = { phi_t = 1e-3, phi_s = 1e-3, theta_b = 1e-3, gamma = 1e-3, epsilon = 1e-3 }
//!
//! [baseline]
//! enabled = true
//! snr_ae_train_db = [-5.0]
//!
//! [attack]
//! snr_grid = [-5.0, 0.0, 5.0, 10.0, 15.0]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetName, DatasetSpec, ImageShape, Palette, SplitFractions};
use crate::error::{Error, Result};
use crate::nn::{Architecture, ClassifierConfig};
use crate::objectives::EstimatorConfig;
use crate::rng;
use crate::training::{AdversarialConfig, TrainConfig};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "PRIVJSCC_OUTPUT_ROOT";

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// The `[dataset]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub name: DatasetName,
    #[serde(default)]
    pub seed: u64,
    /// Keep only the first `limit` source images (before splitting).
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub palette: Palette,
    /// UTK Face image directory; required for `utkface`.
    #[serde(default)]
    pub source_dir: Option<PathBuf>,
    /// Image size for `utkface` (colored MNIST is always 28×28).
    #[serde(default)]
    pub image_size: Option<usize>,
}

impl DatasetSection {
    pub fn spec(&self) -> DatasetSpec {
        let side = match self.name {
            DatasetName::ColoredMnist => 28,
            DatasetName::Utkface => self.image_size.unwrap_or(64),
        };
        DatasetSpec {
            name: self.name,
            private_categories: self.name.private_categories(),
            shape: ImageShape::rgb(side, side),
            split: self.split,
            seed: self.seed,
        }
    }
}

/// The `[baseline]` section: one adversarially trained model per entry of
/// `snr_ae_train_db`. Bob's SNR is shared with `[train]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub enabled: bool,
    pub snr_ae_train_db: Vec<f64>,
    #[serde(default = "BaselineSection::default_lambda")]
    pub lambda: f64,
    #[serde(default = "BaselineSection::default_epochs")]
    pub epochs: usize,
    #[serde(default = "BaselineSection::default_steps")]
    pub adversary_steps: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
}

impl BaselineSection {
    fn default_lambda() -> f64 {
        AdversarialConfig::default().lambda
    }
    fn default_epochs() -> usize {
        AdversarialConfig::default().epochs
    }
    fn default_steps() -> usize {
        1
    }
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            enabled: false,
            snr_ae_train_db: Vec::new(),
            lambda: Self::default_lambda(),
            epochs: Self::default_epochs(),
            adversary_steps: Self::default_steps(),
            batch_size: None,
            learning_rate: None,
        }
    }
}

/// The `[attack]` section: evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "AttackSection::default_grid")]
    pub snr_grid: Vec<f64>,
    #[serde(default)]
    pub eavesdropper: ClassifierConfig,
    #[serde(default = "ClassifierConfig::linear")]
    pub probe: ClassifierConfig,
    #[serde(default = "AttackSection::default_public_classifier")]
    pub public_classifier: ClassifierConfig,
    /// Images per row of the reconstruction grid.
    #[serde(default = "AttackSection::default_columns")]
    pub grid_columns: usize,
}

impl AttackSection {
    fn default_grid() -> Vec<f64> {
        vec![-5.0, 0.0, 5.0, 10.0, 15.0]
    }
    fn default_public_classifier() -> ClassifierConfig {
        ClassifierConfig {
            hidden: 0,
            epochs: 3,
            batch_size: 64,
            learning_rate: 2e-3,
        }
    }
    fn default_columns() -> usize {
        8
    }
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            snr_grid: Self::default_grid(),
            eavesdropper: ClassifierConfig::default(),
            probe: ClassifierConfig::linear(),
            public_classifier: Self::default_public_classifier(),
            grid_columns: Self::default_columns(),
        }
    }
}

/// Conv widths; the codeword lengths come from `[train]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSection {
    pub encoder_channels: Vec<usize>,
    pub private_encoder_channels: Vec<usize>,
    pub decoder_channels: [usize; 2],
    pub head_hidden: usize,
    pub discriminator_floor: f64,
}

impl Default for ArchitectureSection {
    fn default() -> Self {
        let a = Architecture::colored_mnist();
        ArchitectureSection {
            encoder_channels: a.encoder_channels,
            private_encoder_channels: a.private_encoder_channels,
            decoder_channels: a.decoder_channels,
            head_hidden: a.head_hidden,
            discriminator_floor: a.discriminator_floor,
        }
    }
}

/// A full experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub architecture: ArchitectureSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub attack: AttackSection,
}

/// Keys that would tie the training sections to the eavesdropper's channel.
fn forbidden_training_key(key: &str) -> bool {
    let k = key.to_ascii_lowercase();
    k.contains("snr_ae") || k.starts_with("eve")
}

fn reject_forbidden(value: &toml::Value, path: &str) -> Result<()> {
    if let toml::Value::Table(table) = value {
        for (key, child) in table {
            let here = format!("{path}.{key}");
            if forbidden_training_key(key) {
                return Err(Error::Config(format!(
                    "`{here}`: the disentangled pipeline only knows Bob's SNR; \
                     eavesdropper settings belong in [attack]"
                )));
            }
            reject_forbidden(child, &here)?;
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for section in ["train", "architecture"] {
            if let Some(v) = raw.get(section) {
                reject_forbidden(v, section)?;
            }
        }
        for section in ["train", "baseline"] {
            if raw.get(section).and_then(|v| v.get("seed")).is_some() {
                return Err(Error::Config(format!(
                    "`{section}.seed` is derived from the top-level seed; remove it"
                )));
            }
        }
        let mut config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.set_seed(config.seed);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text)
    }

    /// Replaces the global seed and every seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = rng::derive(seed, "train");
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || self.name.starts_with('.')
        {
            return Err(Error::Config(format!(
                "experiment name {:?} must be non-empty and use [A-Za-z0-9._-]",
                self.name
            )));
        }
        self.dataset.spec().validate()?;
        if self.dataset.name == DatasetName::Utkface && self.dataset.source_dir.is_none() {
            return Err(Error::Config("utkface needs dataset.source_dir".into()));
        }
        if self.dataset.limit == Some(0) {
            return Err(Error::Config("dataset.limit must be positive".into()));
        }
        self.dataset.palette.validate()?;
        self.train.validate()?;
        self.architecture().validate()?;
        if self.baseline.enabled {
            if self.baseline.snr_ae_train_db.is_empty() {
                return Err(Error::Config(
                    "baseline.enabled needs at least one snr_ae_train_db entry".into(),
                ));
            }
            let mut seen = Vec::new();
            for &snr in &self.baseline.snr_ae_train_db {
                if !snr.is_finite() || seen.contains(&snr) {
                    return Err(Error::Config(format!(
                        "baseline SNRs must be finite and distinct, got {snr}"
                    )));
                }
                seen.push(snr);
            }
            for snr in &self.baseline.snr_ae_train_db {
                self.adversarial_config(*snr).validate()?;
            }
        }
        if self.attack.snr_grid.is_empty() || self.attack.snr_grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("attack.snr_grid must hold finite values".into()));
        }
        self.attack.eavesdropper.validate()?;
        self.attack.probe.validate()?;
        self.attack.public_classifier.validate()?;
        if self.attack.grid_columns == 0 {
            return Err(Error::Config("attack.grid_columns must be positive".into()));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        let a = &self.architecture;
        Architecture {
            image: self.dataset.spec().shape,
            m_t: self.train.m_t,
            m_s: self.train.m_s,
            private_categories: self.dataset.name.private_categories(),
            encoder_channels: a.encoder_channels.clone(),
            private_encoder_channels: a.private_encoder_channels.clone(),
            decoder_channels: a.decoder_channels,
            head_hidden: a.head_hidden,
            discriminator_floor: a.discriminator_floor,
        }
    }

    /// Settings of the baseline trained against an eavesdropper at
    /// `snr_ae_train_db`.
    pub fn adversarial_config(&self, snr_ae_train_db: f64) -> AdversarialConfig {
        let b = &self.baseline;
        AdversarialConfig {
            lambda: b.lambda,
            snr_ab_db: self.train.snr_ab_db,
            epochs: b.epochs,
            adversary_steps: b.adversary_steps,
            batch_size: b.batch_size.unwrap_or(self.train.batch_size),
            learning_rate: b.learning_rate.unwrap_or(self.train.learning_rates.phi_t),
            seed: rng::derive(self.seed, &format!("baseline@{snr_ae_train_db}")),
        }
    }

    pub fn estimator(&self) -> EstimatorConfig {
        EstimatorConfig::default()
    }

    /// Short content hash of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    /// `output_dir`, unless overridden by [`OUTPUT_ROOT_ENV`].
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
seed = 3

[dataset]
name = "colored_mnist"

[train]
alpha = 1.0
beta = 1.0
snr_ab_db = 10.0
discriminator_steps = 1
batch_size = 64
m_t = 48
m_s = 16
epochs = { stage1 = 1, stage2 = 1, finetune = 1 }
learning_rates = { phi_t = 1e-3, phi_s = 1e-3, theta_b = 1e-3, gamma = 1e-3, epsilon = 1e-3 }
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.attack.snr_grid, vec![-5.0, 0.0, 5.0, 10.0, 15.0]);
        assert!(!c.baseline.enabled);
        assert_eq!(c.train.seed, rng::derive(3, "train"));
        assert_eq!(c.architecture().m(), 64);
        assert_eq!(c.output_dir, PathBuf::from("runs"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("name = \"t\"", "name = \"t\"\ncolour = 1");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
        let text = MINIMAL.replace("m_s = 16", "m_s = 16\nwidth = 3");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn eavesdropper_snr_under_training_is_rejected() {
        for line in ["snr_ae_db = 5.0", "SNR_AE = 5.0", "eve_snr = 1.0"] {
            let text = MINIMAL.replace("m_s = 16", &format!("m_s = 16\n{line}"));
            let err = ExperimentConfig::from_toml(&text).unwrap_err();
            assert!(err.to_string().contains("Bob"), "{line}: {err}");
        }
        let nested = MINIMAL.replace(
            "epochs = { stage1 = 1,",
            "epochs = { snr_ae = 3, stage1 = 1,",
        );
        assert!(ExperimentConfig::from_toml(&nested).is_err());
    }

    #[test]
    fn derived_seeds_cannot_be_set_directly() {
        let text = MINIMAL.replace("m_s = 16", "m_s = 16\nseed = 9");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn hash_tracks_content_and_seed() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.set_seed(4);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn baseline_needs_snrs() {
        let text = format!("{MINIMAL}\n[baseline]\nenabled = true\nsnr_ae_train_db = []\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = format!("{MINIMAL}\n[baseline]\nenabled = true\nsnr_ae_train_db = [-5.0, 5.0]\n");
        let c = ExperimentConfig::from_toml(&text).unwrap();
        assert_ne!(c.adversarial_config(-5.0).seed, c.adversarial_config(5.0).seed);
        assert_eq!(c.adversarial_config(5.0).snr_ab_db, 10.0);
    }
}
