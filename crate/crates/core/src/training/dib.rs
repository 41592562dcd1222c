//! The disentangled two-step schedule.
//!
//! 1. `train_stage1`: private encoder φ_s and classifier γ maximise the
//!    private-information bound (channel-free).
//! 2. `train_stage2`: with φ_s frozen, the discriminator ε and the pair
//!    (φ_t, θ_B) are updated alternately; the pair minimises the MSE plus
//!    a dependence penalty centred on permuted pairs, and the decoder sees
//!    the concatenation of the separately normalised subcodewords through
//!    Bob's channel.
//! 3. `finetune_decoder`: with both encoders frozen, θ_B is retrained on
//!    `normalize(concat[y_t, 0])`, the codeword actually deployed.
//!
//! Only Bob's SNR enters any of these functions.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use super::{
    guard_finite, map_batches, monitor_probe, scalar, CheckpointSink, LogEvent,
    TrainConfig, TrainingLog,
};
use crate::channel::{normalize_power, ChannelSpec, NoiseSource};
use crate::data::{epoch_batches, ImageSet};
use crate::error::{Error, Result};
use crate::nn::{accuracy, ModelBundle, ParamGroup, Stage};
use crate::objectives::{
    discriminator_loss_logits, permute_marginals, private_info_bound, reconstruction_loss,
    step2_objective_centred, variational_bound, LossReport,
};
use crate::rng;

const EVAL_BATCH: usize = 250;

fn adam(bundle: &ModelBundle, group: ParamGroup, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        bundle.params(group).vars(),
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

fn check_compatible(bundle: &ModelBundle, data: &ImageSet, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    let arch = bundle.architecture();
    if arch.m_t != cfg.m_t || arch.m_s != cfg.m_s {
        return Err(Error::Config(format!(
            "model has m_t={}, m_s={} but the configuration asks for {}, {}",
            arch.m_t, arch.m_s, cfg.m_t, cfg.m_s
        )));
    }
    if arch.image != data.shape() || arch.private_categories != data.private_categories() {
        return Err(Error::Config(
            "model architecture does not match the dataset".into(),
        ));
    }
    if data.len() < 2 {
        return Err(Error::Input("training set needs at least two images".into()));
    }
    Ok(())
}

fn checksums(bundle: &ModelBundle) -> Result<BTreeMap<String, String>> {
    ParamGroup::ALL
        .iter()
        .map(|g| Ok((g.key().to_string(), bundle.checksum(*g)?)))
        .collect()
}

fn bob(cfg: &TrainConfig, label: &str) -> Result<(NoiseSource, f64)> {
    let sigma = ChannelSpec::new(cfg.snr_ab_db, 0)?.sigma()?;
    Ok((NoiseSource::new(rng::derive(cfg.seed, label)), sigma))
}

/// Mean private-classifier cross-entropy and accuracy over `data`.
fn private_classification(bundle: &ModelBundle, data: &ImageSet) -> Result<(f64, f64)> {
    let logits = map_batches(data, EVAL_BATCH, |x| {
        bundle.classify_private_logits(&bundle.private_encode(x)?)
    })?;
    let labels = data.private_labels(&data.all_indices());
    let ce = -scalar(&variational_bound(
        &candle_nn::ops::log_softmax(&logits, D::Minus1)?,
        &labels,
    )?)?;
    let predicted = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
    Ok((ce, accuracy(&predicted, &labels)?))
}

/// Reconstruction MSE over `data` at Bob's SNR with a fixed noise seed.
///
/// With `zero_private` the decoder receives `concat[y_t, 0]`, otherwise
/// `concat[y_t, y_s]`.
pub fn validation_mse(
    bundle: &ModelBundle,
    data: &ImageSet,
    snr_ab_db: f64,
    zero_private: bool,
    seed: u64,
) -> Result<f64> {
    let sigma = ChannelSpec::new(snr_ab_db, seed)?.sigma()?;
    let mut noise = NoiseSource::new(rng::derive(seed, "validation-bob"));
    let mut total = 0.0;
    for batch in crate::data::sequential_batches(data.len(), EVAL_BATCH) {
        let x = data.batch_tensor(&batch, &Device::Cpu)?;
        let y = codeword(bundle, &x, zero_private)?;
        let x_hat = bundle.decode(&noise.transmit(&y, sigma)?)?;
        total += scalar(&reconstruction_loss(&x, &x_hat)?)? * batch.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Step-two codeword: each subcodeword is first scaled to unit average
/// power, so the (unconstrained) scale of the frozen `y_s` cannot starve
/// `y_t` of transmit power. The result has unit power like every codeword.
fn balanced_codeword(y_t: &Tensor, y_s: &Tensor) -> Result<Tensor> {
    normalize_power(&Tensor::cat(&[&normalize_power(y_t)?, &normalize_power(y_s)?], 1)?)
}

/// [`balanced_codeword`] of `x`, or the deployed `normalize(concat[y_t, 0])`.
fn codeword(bundle: &ModelBundle, x: &Tensor, zero_private: bool) -> Result<Tensor> {
    let y_t = bundle.public_encode(x)?;
    if zero_private {
        let zeros = Tensor::zeros((y_t.dim(0)?, bundle.architecture().m_s), y_t.dtype(), y_t.device())?;
        normalize_power(&Tensor::cat(&[&y_t, &zeros], 1)?)
    } else {
        balanced_codeword(&y_t, &bundle.private_encode(x)?)
    }
}

fn step_report(total: f64, loss_name: &str, batch_size: usize) -> LossReport {
    LossReport {
        total,
        alpha: 0.0,
        components: BTreeMap::from([(loss_name.to_string(), total)]),
        batch_size,
    }
}

/// Step one: fits φ_s and γ by minimising `-beta · private_info_bound`.
pub fn train_stage1(
    bundle: &mut ModelBundle,
    train: &ImageSet,
    validation: &ImageSet,
    cfg: &TrainConfig,
    log: &mut TrainingLog,
    sink: Option<&CheckpointSink>,
) -> Result<()> {
    check_compatible(bundle, train, cfg)?;
    let stage = Stage::Stage1;
    log.push(LogEvent::StageStart {
        stage: stage.to_string(),
    })?;
    let (initial_loss, initial_accuracy) = private_classification(bundle, validation)?;
    let mut opt_s = adam(bundle, ParamGroup::PrivateEncoder, cfg.learning_rates.phi_s)?;
    let mut opt_g = adam(bundle, ParamGroup::Classifier, cfg.learning_rates.gamma)?;
    let mut order = rng::seeded(rng::derive(cfg.seed, "stage1-batches"));
    let mut step = 0;
    for epoch in 0..cfg.epochs.stage1 {
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(train.len(), cfg.batch_size, &mut order);
        for batch in &batches {
            let x = train.batch_tensor(batch, &Device::Cpu)?;
            let s = train.private_labels(batch);
            let bound = private_info_bound(&x, &s, bundle)?;
            let loss = (bound * -cfg.beta)?;
            let value = scalar(&loss)?;
            guard_finite(value, "stage-1 loss", bundle, stage, sink)?;
            let grads = loss.backward()?;
            opt_s.step(&grads)?;
            opt_g.step(&grads)?;
            let mut report = step_report(value, "private_bound", batch.len());
            report.components.insert("private_bound".into(), -value / cfg.beta);
            log.push(LogEvent::Step {
                stage: stage.to_string(),
                epoch,
                step,
                report,
            })?;
            epoch_loss += value;
            step += 1;
        }
        let (val_loss, val_accuracy) = private_classification(bundle, validation)?;
        log::info!("stage1 epoch {epoch}: validation colour accuracy {val_accuracy:.3}");
        log.push(LogEvent::Epoch {
            stage: stage.to_string(),
            epoch,
            metrics: BTreeMap::from([
                ("train_loss".into(), epoch_loss / batches.len().max(1) as f64),
                ("validation_loss".into(), val_loss),
                ("validation_private_accuracy".into(), val_accuracy),
            ]),
        })?;
        bundle.set_stage(stage);
        if let Some(sink) = sink {
            sink.save_bundle(bundle)?;
        }
    }
    let (final_loss, final_accuracy) = private_classification(bundle, validation)?;
    log.push(LogEvent::StageEnd {
        stage: stage.to_string(),
        checksums: checksums(bundle)?,
        summary: BTreeMap::from([
            ("initial_validation_loss".into(), initial_loss),
            ("initial_validation_private_accuracy".into(), initial_accuracy),
            ("final_validation_loss".into(), final_loss),
            ("final_validation_private_accuracy".into(), final_accuracy),
        ]),
    })?;
    Ok(())
}

/// Per-epoch stage-two diagnostics on the validation set.
fn stage2_metrics(bundle: &ModelBundle, validation: &ImageSet, cfg: &TrainConfig) -> Result<BTreeMap<String, f64>> {
    let idx = validation.all_indices();
    let y_t = map_batches(validation, EVAL_BATCH, |x| bundle.public_encode(x))?;
    let y_s = map_batches(validation, EVAL_BATCH, |x| bundle.private_encode(x))?;
    let logits = bundle.discriminator_logits(&normalize_power(&y_t)?, &normalize_power(&y_s)?)?;
    let mi = scalar(&crate::objectives::mi_ts_estimate_logits(&logits)?)?;
    let probe_seed = rng::derive(cfg.seed, "monitor-probe");
    Ok(BTreeMap::from([
        ("validation_mse".into(), validation_mse(bundle, validation, cfg.snr_ab_db, false, cfg.seed)?),
        ("validation_mse_zeroed".into(), validation_mse(bundle, validation, cfg.snr_ab_db, true, cfg.seed)?),
        ("validation_mi_ts_estimate".into(), mi),
        (
            "probe_public_from_y_t".into(),
            monitor_probe(&y_t, &validation.public_labels(&idx), validation.public_categories(), probe_seed)?,
        ),
        (
            "probe_private_from_y_t".into(),
            monitor_probe(&y_t, &validation.private_labels(&idx), validation.private_categories(), probe_seed)?,
        ),
    ]))
}

/// Step two: φ_s stays frozen; ε and (φ_t, θ_B) are trained alternately.
pub fn train_stage2(
    bundle: &mut ModelBundle,
    train: &ImageSet,
    validation: &ImageSet,
    cfg: &TrainConfig,
    log: &mut TrainingLog,
    sink: Option<&CheckpointSink>,
) -> Result<()> {
    if bundle.stage() < Stage::Stage1 {
        return Err(Error::Precondition(
            "stage2 needs a model that completed stage1".into(),
        ));
    }
    check_compatible(bundle, train, cfg)?;
    let stage = Stage::Stage2;
    log.push(LogEvent::StageStart {
        stage: stage.to_string(),
    })?;
    let frozen_before = bundle.checksum(ParamGroup::PrivateEncoder)?;
    let mut opt_t = adam(bundle, ParamGroup::PublicEncoder, cfg.learning_rates.phi_t)?;
    let mut opt_b = adam(bundle, ParamGroup::Decoder, cfg.learning_rates.theta_b)?;
    let mut opt_e = adam(bundle, ParamGroup::Discriminator, cfg.learning_rates.epsilon)?;
    let (mut noise, sigma) = bob(cfg, "stage2-bob")?;
    let mut order = rng::seeded(rng::derive(cfg.seed, "stage2-batches"));
    let perm_seed = rng::derive(cfg.seed, "stage2-permutations");
    let mut step = 0;
    for epoch in 0..cfg.epochs.stage2 {
        let mut sums = [0.0f64; 3];
        let batches = epoch_batches(train.len(), cfg.batch_size, &mut order);
        for batch in &batches {
            let x = train.batch_tensor(batch, &Device::Cpu)?;
            let s = train.private_labels(batch);
            // the discriminator sees power-normalised subcodewords, which
            // keeps its inputs on a fixed scale while φ_t moves
            let y_s_raw = bundle.private_encode(&x)?.detach();
            let y_s = normalize_power(&y_s_raw)?;
            let y_t = normalize_power(&bundle.public_encode(&x)?)?;
            let y_t_fixed = y_t.detach();

            let mut disc_value = 0.0;
            for k in 0..cfg.discriminator_steps {
                let seed = rng::derive(perm_seed, &format!("{step}/{k}"));
                let (pt, ps) = permute_marginals(&y_t_fixed, &y_s, seed)?;
                let loss = discriminator_loss_logits(
                    &bundle.discriminator_logits(&y_t_fixed, &y_s)?,
                    &bundle.discriminator_logits(&pt, &ps)?,
                )?;
                disc_value = scalar(&loss)?;
                guard_finite(disc_value, "discriminator loss", bundle, stage, sink)?;
                opt_e.backward_step(&loss)?;
            }

            // both pair sets carry gradient to φ_t, see step2_objective_centred
            let joint = bundle.discriminator_logits(&y_t, &y_s)?;
            let (pt, ps) = permute_marginals(&y_t, &y_s, rng::derive(perm_seed, &format!("{step}/encoder")))?;
            let perm = bundle.discriminator_logits(&pt, &ps)?;
            let y = balanced_codeword(&y_t, &y_s)?;
            let x_hat = bundle.decode(&noise.transmit(&y, sigma)?)?;
            let (total, mut report) = step2_objective_centred(&x, &x_hat, &joint, &perm, cfg.alpha)?;
            guard_finite(report.total, "stage-2 objective", bundle, stage, sink)?;
            let grads = total.backward()?;
            opt_t.step(&grads)?;
            opt_b.step(&grads)?;

            let log_probs = candle_nn::ops::log_softmax(&bundle.classify_private_logits(&y_s_raw)?, D::Minus1)?;
            report
                .components
                .insert("private_bound".into(), scalar(&variational_bound(&log_probs, &s)?)?);
            report.components.insert("discriminator_bce".into(), disc_value);
            sums[0] += report.total;
            sums[1] += report.components["mse"];
            sums[2] += disc_value;
            log.push(LogEvent::Step {
                stage: stage.to_string(),
                epoch,
                step,
                report,
            })?;
            step += 1;
        }
        let n = batches.len().max(1) as f64;
        let mut metrics = stage2_metrics(bundle, validation, cfg)?;
        metrics.insert("train_total".into(), sums[0] / n);
        metrics.insert("train_mse".into(), sums[1] / n);
        metrics.insert("train_discriminator_bce".into(), sums[2] / n);
        log::info!(
            "stage2 epoch {epoch}: validation mse {:.4}, colour probe on y_t {:.3}, digit probe on y_t {:.3}",
            metrics["validation_mse"],
            metrics["probe_private_from_y_t"],
            metrics["probe_public_from_y_t"]
        );
        log.push(LogEvent::Epoch {
            stage: stage.to_string(),
            epoch,
            metrics,
        })?;
        bundle.set_stage(stage);
        if let Some(sink) = sink {
            sink.save_bundle(bundle)?;
        }
    }
    let frozen_after = bundle.checksum(ParamGroup::PrivateEncoder)?;
    if frozen_before != frozen_after {
        return Err(Error::Precondition(
            "private encoder changed during stage2".into(),
        ));
    }
    log.push(LogEvent::StageEnd {
        stage: stage.to_string(),
        checksums: checksums(bundle)?,
        summary: BTreeMap::from([
            ("validation_mse".into(), validation_mse(bundle, validation, cfg.snr_ab_db, false, cfg.seed)?),
            ("constant_predictor_mse".into(), validation.constant_predictor_mse()),
        ]),
    })?;
    Ok(())
}

/// Retrains the decoder on `concat[y_t, 0]` with both encoders frozen.
pub fn finetune_decoder(
    bundle: &mut ModelBundle,
    train: &ImageSet,
    validation: &ImageSet,
    cfg: &TrainConfig,
    log: &mut TrainingLog,
    sink: Option<&CheckpointSink>,
) -> Result<()> {
    if bundle.stage() < Stage::Stage2 {
        return Err(Error::Precondition(
            "finetune needs a model that completed stage2".into(),
        ));
    }
    check_compatible(bundle, train, cfg)?;
    let stage = Stage::Finetune;
    log.push(LogEvent::StageStart {
        stage: stage.to_string(),
    })?;
    let stage2_mse = validation_mse(bundle, validation, cfg.snr_ab_db, false, cfg.seed)?;
    let zeroed_before = validation_mse(bundle, validation, cfg.snr_ab_db, true, cfg.seed)?;
    let encoders_before = (
        bundle.checksum(ParamGroup::PublicEncoder)?,
        bundle.checksum(ParamGroup::PrivateEncoder)?,
    );
    let mut opt_b = adam(bundle, ParamGroup::Decoder, cfg.learning_rates.theta_b)?;
    let (mut noise, sigma) = bob(cfg, "finetune-bob")?;
    let mut order = rng::seeded(rng::derive(cfg.seed, "finetune-batches"));
    let mut step = 0;
    for epoch in 0..cfg.epochs.finetune {
        let mut sum = 0.0;
        let batches = epoch_batches(train.len(), cfg.batch_size, &mut order);
        for batch in &batches {
            let x = train.batch_tensor(batch, &Device::Cpu)?;
            let y = codeword(bundle, &x, true)?.detach();
            let x_hat = bundle.decode(&noise.transmit(&y, sigma)?)?;
            let loss = reconstruction_loss(&x, &x_hat)?;
            let value = scalar(&loss)?;
            guard_finite(value, "fine-tune loss", bundle, stage, sink)?;
            opt_b.backward_step(&loss)?;
            log.push(LogEvent::Step {
                stage: stage.to_string(),
                epoch,
                step,
                report: step_report(value, "mse", batch.len()),
            })?;
            sum += value;
            step += 1;
        }
        let zeroed = validation_mse(bundle, validation, cfg.snr_ab_db, true, cfg.seed)?;
        log::info!("finetune epoch {epoch}: validation mse with zeroed y_s {zeroed:.4}");
        log.push(LogEvent::Epoch {
            stage: stage.to_string(),
            epoch,
            metrics: BTreeMap::from([
                ("train_mse".into(), sum / batches.len().max(1) as f64),
                ("validation_mse_zeroed".into(), zeroed),
            ]),
        })?;
        bundle.set_stage(stage);
        if let Some(sink) = sink {
            sink.save_bundle(bundle)?;
        }
    }
    let encoders_after = (
        bundle.checksum(ParamGroup::PublicEncoder)?,
        bundle.checksum(ParamGroup::PrivateEncoder)?,
    );
    if encoders_before != encoders_after {
        return Err(Error::Precondition("encoders changed during finetune".into()));
    }
    let zeroed_after = validation_mse(bundle, validation, cfg.snr_ab_db, true, cfg.seed)?;
    log.push(LogEvent::StageEnd {
        stage: stage.to_string(),
        checksums: checksums(bundle)?,
        summary: BTreeMap::from([
            ("validation_mse_zeroed_before".into(), zeroed_before),
            ("validation_mse_zeroed_after".into(), zeroed_after),
            ("stage2_validation_mse".into(), stage2_mse),
            ("gap_to_stage2".into(), zeroed_after - stage2_mse),
        ]),
    })?;
    Ok(())
}
