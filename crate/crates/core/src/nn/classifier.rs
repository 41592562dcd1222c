use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{AdamW, Linear, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use super::{ConvEncoder, Mlp, ParamBuilder, ParamStore};
use crate::channel::NoiseSource;
use crate::data::{epoch_batches, sequential_batches, ImageSet};
use crate::error::{Error, Result};
use crate::rng;

/// Hyper-parameters for the stand-alone classifiers (eavesdropper, probes,
/// digit classifier).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Hidden width; 0 gives a linear (softmax-regression) classifier.
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 128,
            epochs: 20,
            batch_size: 128,
            learning_rate: 1e-3,
        }
    }
}

impl ClassifierConfig {
    /// A linear probe. On standardised features a linear model tolerates
    /// a large step size; with the MLP defaults it stops well short of
    /// convergence on peaked features such as log-probabilities.
    pub fn linear() -> Self {
        ClassifierConfig {
            hidden: 0,
            epochs: 50,
            learning_rate: 1e-2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config(
                "classifier needs epochs >= 1 and batch_size >= 2".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("classifier learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Head {
    Linear(Linear),
    Mlp(Mlp),
}

/// A classifier over fixed-width feature vectors. Inputs are standardised
/// with statistics frozen at fit time.
#[derive(Debug, Clone)]
pub struct FeatureClassifier {
    head: Head,
    mean: Tensor,
    scale: Tensor,
    params: ParamStore,
    classes: usize,
}

impl FeatureClassifier {
    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let x = features
            .to_dtype(DType::F32)?
            .broadcast_sub(&self.mean)?
            .broadcast_div(&self.scale)?;
        match &self.head {
            Head::Linear(l) => Ok(l.forward(&x)?),
            Head::Mlp(m) => m.forward(&x),
        }
    }

    /// Most likely class per row.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(features.dim(0)?);
        for batch in sequential_batches(features.dim(0)?, 1024) {
            let rows = features.narrow(0, batch[0], batch.len())?;
            out.extend(self.logits(&rows)?.argmax(D::Minus1)?.to_vec1::<u32>()?);
        }
        Ok(out)
    }
}

/// Fraction of positions where `predicted == truth`.
pub fn accuracy(predicted: &[u32], truth: &[u32]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::Input(format!(
            "accuracy needs equal non-empty label vectors, got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

fn check_labels(labels: &[u32], classes: usize, rows: usize) -> Result<()> {
    if labels.len() != rows || rows < 2 {
        return Err(Error::Input(format!(
            "need at least two rows with one label each, got {rows} rows and {} labels",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

fn ensure_finite(loss: &Tensor, what: &str) -> Result<f32> {
    let v = loss.to_dtype(DType::F32)?.to_scalar::<f32>()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("{what}: non-finite loss {v}")));
    }
    Ok(v)
}

/// Trains a fresh classifier predicting `labels` from the rows of
/// `features` (shape `(N, d)`).
///
/// When `noise_sigma > 0` every mini-batch is corrupted by fresh AWGN of
/// that standard deviation, which is how an eavesdropper learns from the
/// noisy observations at its own SNR. Deterministic given `seed`.
pub fn fit_classifier(
    features: &Tensor,
    labels: &[u32],
    classes: usize,
    noise_sigma: f64,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<FeatureClassifier> {
    cfg.validate()?;
    if features.rank() != 2 {
        return Err(Error::Input(format!("features must be (N, d), got {:?}", features.dims())));
    }
    let (rows, width) = features.dims2()?;
    check_labels(labels, classes, rows)?;
    let device = Device::Cpu;
    // the classifier is trained on fixed inputs, never through them
    let features = features.detach().to_dtype(DType::F32)?;

    // standardise with the statistics of the observed (noisy) inputs
    let mean = features.mean_keepdim(0)?;
    let var = features.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?;
    let scale = (var + noise_sigma * noise_sigma)?
        .sqrt()?
        .to_vec2::<f32>()?
        .remove(0)
        .into_iter()
        .map(|s| if s > 1e-6 { s } else { 1.0 })
        .collect::<Vec<_>>();
    let scale = Tensor::from_vec(scale, (1, width), &device)?;

    let mut params = ParamStore::default();
    let mut init = rng::seeded(rng::derive(seed, "classifier-init"));
    let head = {
        let mut b = ParamBuilder::new(&mut params, &mut init, &device);
        if cfg.hidden == 0 {
            Head::Linear(b.linear("fc", width, classes)?)
        } else {
            Head::Mlp(Mlp::new(&mut b, width, cfg.hidden, classes)?)
        }
    };
    let clf = FeatureClassifier {
        head,
        mean,
        scale,
        params,
        classes,
    };
    let mut opt = AdamW::new(
        clf.params.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut order = rng::seeded(rng::derive(seed, "classifier-batches"));
    let mut noise = NoiseSource::new(rng::derive(seed, "classifier-noise"));
    let targets = Tensor::from_vec(labels.to_vec(), rows, &device)?;
    for _ in 0..cfg.epochs {
        for batch in epoch_batches(rows, cfg.batch_size, &mut order) {
            let idx = Tensor::from_vec(
                batch.iter().map(|&i| i as u32).collect::<Vec<_>>(),
                batch.len(),
                &device,
            )?;
            let x = noise.transmit(&features.index_select(&idx, 0)?, noise_sigma)?;
            let y = targets.index_select(&idx, 0)?;
            let loss = candle_nn::loss::cross_entropy(&clf.logits(&x)?, &y)?;
            ensure_finite(&loss, "classifier training")?;
            opt.backward_step(&loss)?;
        }
    }
    Ok(clf)
}

/// A small convolutional classifier over images, used to check that
/// reconstructions keep their public content.
#[derive(Debug, Clone)]
pub struct ImageClassifier {
    net: ConvEncoder,
    params: ParamStore,
}

impl ImageClassifier {
    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Logits for a `(B, C, H, W)` batch.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.net.forward(x)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(x.dim(0)?);
        for batch in sequential_batches(x.dim(0)?, 512) {
            let rows = x.narrow(0, batch[0], batch.len())?;
            out.extend(self.logits(&rows)?.argmax(D::Minus1)?.to_vec1::<u32>()?);
        }
        Ok(out)
    }
}

/// Trains an [`ImageClassifier`] for the public labels of `train`.
pub fn fit_image_classifier(
    train: &ImageSet,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<ImageClassifier> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::Input("image classifier needs at least two images".into()));
    }
    let device = Device::Cpu;
    let mut params = ParamStore::default();
    let mut init = rng::seeded(rng::derive(seed, "image-classifier-init"));
    let net = ConvEncoder::new(
        &mut ParamBuilder::new(&mut params, &mut init, &device),
        train.shape(),
        &[16, 32],
        train.public_categories(),
    )?;
    let mut opt = AdamW::new(
        params.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut order = rng::seeded(rng::derive(seed, "image-classifier-batches"));
    for _ in 0..cfg.epochs {
        for batch in epoch_batches(train.len(), cfg.batch_size, &mut order) {
            let x = train.batch_tensor(&batch, &device)?;
            let y = Tensor::from_vec(train.public_labels(&batch), batch.len(), &device)?;
            let loss = candle_nn::loss::cross_entropy(&net.forward(&x)?, &y)?;
            ensure_finite(&loss, "image classifier training")?;
            opt.backward_step(&loss)?;
        }
    }
    Ok(ImageClassifier { net, params })
}
