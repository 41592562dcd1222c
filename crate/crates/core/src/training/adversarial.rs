//! Adversarially trained JSCC baseline.
//!
//! A single encoder/decoder pair is trained against an internal adversary
//! that tries to recover the private label from the codeword as received
//! at an *assumed* eavesdropper SNR. The encoder minimises
//! `MSE − λ · CE(adversary)`; the adversary minimises its own
//! cross-entropy. Unlike the disentangled codec, the result depends on
//! that assumed SNR, which is stored with the model.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use super::{scalar, LogEvent, TrainingLog};
use crate::channel::{normalize_power, ChannelSpec, NoiseSource};
use crate::data::{epoch_batches, sequential_batches, ImageSet};
use crate::error::{Error, Result};
use crate::nn::{accuracy, checkpoint, Architecture, ConvDecoder, ConvEncoder, Mlp, ParamBuilder, ParamStore};
use crate::objectives::{reconstruction_loss, LossReport};
use crate::rng;

/// Settings of the adversarial baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialConfig {
    /// Weight of the adversary's cross-entropy in the encoder objective.
    pub lambda: f64,
    pub snr_ab_db: f64,
    pub epochs: usize,
    /// Adversary updates per encoder/decoder update.
    pub adversary_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig {
            lambda: 0.5,
            snr_ab_db: 10.0,
            epochs: 30,
            adversary_steps: 1,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be finite and >= 0".into()));
        }
        if !self.snr_ab_db.is_finite() {
            return Err(Error::Config("snr_ab_db must be finite".into()));
        }
        if self.epochs == 0 || self.adversary_steps == 0 || self.batch_size < 2 {
            return Err(Error::Config(
                "baseline needs epochs >= 1, adversary_steps >= 1 and batch_size >= 2".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("baseline learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder, decoder and internal adversary of the baseline.
#[derive(Debug, Clone)]
pub struct AdversarialModel {
    arch: Architecture,
    snr_ae_train_db: f64,
    lambda: f64,
    trained: bool,
    encoder: ConvEncoder,
    decoder: ConvDecoder,
    adversary: Mlp,
    params: BTreeMap<&'static str, ParamStore>,
}

const ENCODER: &str = "encoder";
const DECODER: &str = "decoder";
const ADVERSARY: &str = "adversary";

impl AdversarialModel {
    /// Fresh parameters. The codeword length is `arch.m()` so channel use
    /// matches the disentangled codec.
    pub fn new(arch: Architecture, snr_ae_train_db: f64, lambda: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        ChannelSpec::new(snr_ae_train_db, 0)?;
        let device = Device::Cpu;
        let mut params = BTreeMap::new();

        let mut store = ParamStore::default();
        let mut r = rng::seeded(rng::derive(seed, "adversarial-encoder"));
        let encoder = ConvEncoder::new(
            &mut ParamBuilder::new(&mut store, &mut r, &device),
            arch.image,
            &arch.encoder_channels,
            arch.m(),
        )?;
        params.insert(ENCODER, store);

        let mut store = ParamStore::default();
        let mut r = rng::seeded(rng::derive(seed, "adversarial-decoder"));
        let decoder = ConvDecoder::new(
            &mut ParamBuilder::new(&mut store, &mut r, &device),
            arch.m(),
            arch.decoder_channels,
            arch.image,
        )?;
        params.insert(DECODER, store);

        let mut store = ParamStore::default();
        let mut r = rng::seeded(rng::derive(seed, "adversarial-adversary"));
        let adversary = Mlp::new(
            &mut ParamBuilder::new(&mut store, &mut r, &device),
            arch.m(),
            arch.head_hidden,
            arch.private_categories,
        )?;
        params.insert(ADVERSARY, store);

        Ok(AdversarialModel {
            arch,
            snr_ae_train_db,
            lambda,
            trained: false,
            encoder,
            decoder,
            adversary,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// The eavesdropper SNR this model was trained against.
    pub fn snr_ae_train_db(&self) -> f64 {
        self.snr_ae_train_db
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn params(&self, group: &str) -> Option<&ParamStore> {
        self.params.get(group)
    }

    /// Raw (unnormalised) codewords.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }

    pub fn decode(&self, y_hat: &Tensor) -> Result<Tensor> {
        self.decoder.forward(y_hat)
    }

    pub fn adversary_logits(&self, y_hat: &Tensor) -> Result<Tensor> {
        self.adversary.forward(y_hat)
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert("snr_ae_train_db".into(), self.snr_ae_train_db.to_string());
        meta.insert("lambda".into(), self.lambda.to_string());
        meta.insert("trained".into(), self.trained.to_string());
        let groups: Vec<(&str, &ParamStore)> = self.params.iter().map(|(k, v)| (*k, v)).collect();
        let arch = serde_json::to_string(&self.arch).expect("architecture serializes");
        checkpoint::save(path, "adversarial", &arch, &groups, &meta)
    }

    pub fn load(path: &Path, expected: Option<&Architecture>) -> Result<(Self, BTreeMap<String, String>)> {
        let loaded = checkpoint::load(path, "adversarial")?;
        let arch: Architecture = serde_json::from_str(loaded.get("architecture")?)
            .map_err(|e| Error::format(path, format!("bad architecture descriptor: {e}")))?;
        if expected.is_some_and(|e| e != &arch) {
            return Err(Error::Config(format!(
                "checkpoint {} was written for a different architecture",
                path.display()
            )));
        }
        let number = |key: &str| -> Result<f64> {
            loaded
                .get(key)?
                .parse()
                .map_err(|_| Error::format(path, format!("metadata `{key}` is not a number")))
        };
        let mut model = AdversarialModel::new(arch, number("snr_ae_train_db")?, number("lambda")?, 0)?;
        for (group, store) in &model.params {
            store.assign(&loaded.tensors, &format!("{group}."))?;
        }
        model.trained = loaded.get("trained")? == "true";
        Ok((model, loaded.metadata))
    }
}

fn adam(store: &ParamStore, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        store.vars(),
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

fn labels_tensor(labels: Vec<u32>) -> Result<Tensor> {
    let n = labels.len();
    Ok(Tensor::from_vec(labels, n, &Device::Cpu)?)
}

/// Reconstruction MSE at Bob's SNR and internal-adversary accuracy at the
/// training eavesdropper SNR, with fixed noise seeds.
fn evaluate(model: &AdversarialModel, data: &ImageSet, cfg: &AdversarialConfig) -> Result<(f64, f64)> {
    let sigma_b = ChannelSpec::new(cfg.snr_ab_db, 0)?.sigma()?;
    let sigma_e = ChannelSpec::new(model.snr_ae_train_db, 0)?.sigma()?;
    let mut bob = NoiseSource::new(rng::derive(cfg.seed, "adversarial-validation-bob"));
    let mut eve = NoiseSource::new(rng::derive(cfg.seed, "adversarial-validation-eve"));
    let mut mse = 0.0;
    let mut predicted = Vec::with_capacity(data.len());
    for batch in sequential_batches(data.len(), 250) {
        let x = data.batch_tensor(&batch, &Device::Cpu)?;
        let y = normalize_power(&model.encode(&x)?)?;
        let x_hat = model.decode(&bob.transmit(&y, sigma_b)?)?;
        mse += scalar(&reconstruction_loss(&x, &x_hat)?)? * batch.len() as f64;
        let logits = model.adversary_logits(&eve.transmit(&y, sigma_e)?)?;
        predicted.extend(logits.argmax(D::Minus1)?.to_vec1::<u32>()?);
    }
    let acc = accuracy(&predicted, &data.private_labels(&data.all_indices()))?;
    Ok((mse / data.len() as f64, acc))
}

/// Trains one baseline model against an eavesdropper assumed to sit at
/// `snr_ae_train_db`. The model is written to `checkpoint` (if given) at
/// the end of every epoch.
pub fn train_adversarial_baseline(
    train: &ImageSet,
    validation: &ImageSet,
    arch: &Architecture,
    snr_ae_train_db: f64,
    cfg: &AdversarialConfig,
    log: &mut TrainingLog,
    checkpoint: Option<(&Path, &BTreeMap<String, String>)>,
) -> Result<AdversarialModel> {
    cfg.validate()?;
    if arch.image != train.shape() || arch.private_categories != train.private_categories() {
        return Err(Error::Config("baseline architecture does not match the dataset".into()));
    }
    let mut model = AdversarialModel::new(arch.clone(), snr_ae_train_db, cfg.lambda, cfg.seed)?;
    let stage = format!("adversarial@{snr_ae_train_db}dB");
    log.push(LogEvent::StageStart { stage: stage.clone() })?;
    let sigma_b = ChannelSpec::new(cfg.snr_ab_db, 0)?.sigma()?;
    let sigma_e = ChannelSpec::new(snr_ae_train_db, 0)?.sigma()?;
    let mut bob = NoiseSource::new(rng::derive(cfg.seed, "adversarial-bob"));
    let mut eve = NoiseSource::new(rng::derive(cfg.seed, "adversarial-eve"));
    let mut opt_enc = adam(&model.params[ENCODER], cfg.learning_rate)?;
    let mut opt_dec = adam(&model.params[DECODER], cfg.learning_rate)?;
    let mut opt_adv = adam(&model.params[ADVERSARY], cfg.learning_rate)?;
    let mut order = rng::seeded(rng::derive(cfg.seed, "adversarial-batches"));
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(train.len(), cfg.batch_size, &mut order);
        let mut sums = [0.0f64; 2];
        for batch in &batches {
            let x = train.batch_tensor(batch, &Device::Cpu)?;
            let s = labels_tensor(train.private_labels(batch))?;
            let y = normalize_power(&model.encode(&x)?)?;

            let y_fixed = y.detach();
            let mut adversary_ce = 0.0;
            for _ in 0..cfg.adversary_steps {
                let heard = eve.transmit(&y_fixed, sigma_e)?;
                let loss = candle_nn::loss::cross_entropy(&model.adversary_logits(&heard)?, &s)?;
                adversary_ce = scalar(&loss)?;
                if !adversary_ce.is_finite() {
                    return Err(Error::Numeric(format!("adversary loss became {adversary_ce}")));
                }
                opt_adv.backward_step(&loss)?;
            }

            let x_hat = model.decode(&bob.transmit(&y, sigma_b)?)?;
            let mse = reconstruction_loss(&x, &x_hat)?;
            let ce = candle_nn::loss::cross_entropy(
                &model.adversary_logits(&eve.transmit(&y, sigma_e)?)?,
                &s,
            )?;
            let total = (&mse - (&ce * cfg.lambda)?)?;
            let total_value = scalar(&total)?;
            if !total_value.is_finite() {
                return Err(Error::Numeric(format!("baseline objective became {total_value}")));
            }
            let grads = total.backward()?;
            opt_enc.step(&grads)?;
            opt_dec.step(&grads)?;

            let mse_value = scalar(&mse)?;
            sums[0] += mse_value;
            sums[1] += adversary_ce;
            log.push(LogEvent::Step {
                stage: stage.clone(),
                epoch,
                step,
                report: LossReport {
                    total: total_value,
                    alpha: 0.0,
                    components: BTreeMap::from([
                        ("mse".into(), mse_value),
                        ("adversary_ce".into(), scalar(&ce)?),
                    ]),
                    batch_size: batch.len(),
                },
            })?;
            step += 1;
        }
        model.trained = true;
        let (val_mse, val_acc) = evaluate(&model, validation, cfg)?;
        log::info!("{stage} epoch {epoch}: validation mse {val_mse:.4}, adversary accuracy {val_acc:.3}");
        let n = batches.len().max(1) as f64;
        log.push(LogEvent::Epoch {
            stage: stage.clone(),
            epoch,
            metrics: BTreeMap::from([
                ("train_mse".into(), sums[0] / n),
                ("train_adversary_ce".into(), sums[1] / n),
                ("validation_mse".into(), val_mse),
                ("validation_adversary_accuracy".into(), val_acc),
            ]),
        })?;
        if let Some((path, meta)) = checkpoint {
            model.save(path, meta)?;
        }
    }
    let (val_mse, val_acc) = evaluate(&model, validation, cfg)?;
    let mut checksums = BTreeMap::new();
    for (group, store) in &model.params {
        checksums.insert(group.to_string(), store.checksum()?);
    }
    log.push(LogEvent::StageEnd {
        stage,
        checksums,
        summary: BTreeMap::from([
            ("snr_ae_train_db".into(), snr_ae_train_db),
            ("lambda".into(), cfg.lambda),
            ("validation_mse".into(), val_mse),
            ("validation_adversary_accuracy".into(), val_acc),
        ]),
    })?;
    Ok(model)
}
