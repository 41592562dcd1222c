//! Eavesdropping attacks, reconstruction metrics, disentanglement probes
//! and embedding export.
//!
//! Everything an eavesdropper sees goes through [`transmit_for_eval`] (or
//! its batched form [`transmitted_codewords`]), which for the disentangled
//! codec only ever puts `normalize(concat[y_t, 0])` on the air.

mod report;

pub use report::{
    read_metrics_csv, write_accuracy_plot, write_image_grid, write_metrics_csv, MetricsRow,
};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{awgn_transmit, normalize_power, ChannelSpec, NoiseSource};
use crate::data::{sequential_batches, ImageSet, ImageShape};
use crate::error::{Error, Result};
use crate::nn::{accuracy, fit_classifier, ClassifierConfig, FeatureClassifier, ModelBundle, Stage};
use crate::rng;
use crate::training::AdversarialModel;

const EVAL_BATCH: usize = 250;

/// Anything that puts codewords on the air and reconstructs images from
/// what Bob receives.
pub trait TransmitModel {
    /// Identifier used in metrics tables and plots.
    fn model_id(&self) -> String;

    /// Number of channel symbols per image.
    fn codeword_len(&self) -> usize;

    /// The pre-noise codewords for a `(B, C, H, W)` batch.
    fn transmitted(&self, x: &Tensor) -> Result<Tensor>;

    /// Reconstructed images from received codewords.
    fn reconstruct(&self, y_hat: &Tensor) -> Result<Tensor>;
}

impl TransmitModel for ModelBundle {
    fn model_id(&self) -> String {
        "dib".into()
    }

    fn codeword_len(&self) -> usize {
        self.architecture().m()
    }

    /// `normalize(concat[y_t, 0])`: the private positions carry exact zeros.
    fn transmitted(&self, x: &Tensor) -> Result<Tensor> {
        if self.stage() < Stage::Stage2 {
            return Err(Error::Precondition(format!(
                "the codec has only completed `{}`; stage2 is required before transmission",
                self.stage()
            )));
        }
        let y_t = self.public_encode(x)?;
        let zeros = Tensor::zeros((y_t.dim(0)?, self.architecture().m_s), y_t.dtype(), y_t.device())?;
        normalize_power(&Tensor::cat(&[&y_t, &zeros], 1)?)
    }

    fn reconstruct(&self, y_hat: &Tensor) -> Result<Tensor> {
        self.decode(y_hat)
    }
}

impl TransmitModel for AdversarialModel {
    fn model_id(&self) -> String {
        format!("adv@{}dB", self.snr_ae_train_db())
    }

    fn codeword_len(&self) -> usize {
        self.architecture().m()
    }

    fn transmitted(&self, x: &Tensor) -> Result<Tensor> {
        if !self.is_trained() {
            return Err(Error::Precondition("the baseline has not been trained".into()));
        }
        normalize_power(&self.encode(x)?)
    }

    fn reconstruct(&self, y_hat: &Tensor) -> Result<Tensor> {
        self.decode(y_hat)
    }
}

/// Negative control: codewords are seeded Gaussian noise that carry no
/// information about the image (the noise stream is keyed by the batch
/// content, so it is deterministic but label-independent).
#[derive(Debug, Clone)]
pub struct NoiseCodewords {
    pub shape: ImageShape,
    pub len: usize,
    pub seed: u64,
}

impl TransmitModel for NoiseCodewords {
    fn model_id(&self) -> String {
        "noise".into()
    }

    fn codeword_len(&self) -> usize {
        self.len
    }

    fn transmitted(&self, x: &Tensor) -> Result<Tensor> {
        let mut hasher = Sha256::new();
        for v in x.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
            hasher.update(v.to_bits().to_le_bytes());
        }
        let digest = hasher.finalize();
        let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let like = Tensor::zeros((x.dim(0)?, self.len), DType::F32, x.device())?;
        NoiseSource::new(rng::derive(self.seed, &key.to_string())).noise_like(&like, 1.0)
    }

    fn reconstruct(&self, y_hat: &Tensor) -> Result<Tensor> {
        let s = self.shape;
        Ok(Tensor::full(0.5f32, (y_hat.dim(0)?, s.channels, s.height, s.width), y_hat.device())?)
    }
}

/// The ideal link: pixels are sent as-is and read back unchanged.
#[derive(Debug, Clone)]
pub struct IdentityTransmission {
    pub shape: ImageShape,
}

impl TransmitModel for IdentityTransmission {
    fn model_id(&self) -> String {
        "identity".into()
    }

    fn codeword_len(&self) -> usize {
        self.shape.len()
    }

    fn transmitted(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.flatten_from(1)?)
    }

    fn reconstruct(&self, y_hat: &Tensor) -> Result<Tensor> {
        let s = self.shape;
        Ok(y_hat.reshape((y_hat.dim(0)?, s.channels, s.height, s.width))?)
    }
}

/// Sends one batch through the channel described by `spec`.
pub fn transmit_for_eval(model: &dyn TransmitModel, x: &Tensor, spec: &ChannelSpec) -> Result<Tensor> {
    awgn_transmit(&model.transmitted(x)?, spec)
}

/// Pre-noise codewords of every image in `data`, shape `(N, M)`.
pub fn transmitted_codewords(model: &dyn TransmitModel, data: &ImageSet) -> Result<Tensor> {
    let mut parts = Vec::new();
    for batch in sequential_batches(data.len(), EVAL_BATCH) {
        parts.push(model.transmitted(&data.batch_tensor(&batch, &Device::Cpu)?)?.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Outcome of one attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub snr_ae_db: f64,
    pub eavesdrop_accuracy: f64,
    pub attacker: String,
    pub n_test: usize,
}

/// Trains Eve: a fresh classifier from noisy codewords (observed at
/// `snr_ae_db`) to private labels.
pub fn train_eavesdropper(
    model: &dyn TransmitModel,
    train: &ImageSet,
    snr_ae_db: f64,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<FeatureClassifier> {
    let sigma = ChannelSpec::new(snr_ae_db, seed)?.sigma()?;
    let features = transmitted_codewords(model, train)?;
    let labels = train.private_labels(&train.all_indices());
    fit_classifier(&features, &labels, train.private_categories(), sigma, cfg, seed)
}

fn attacker_descriptor(cfg: &ClassifierConfig) -> String {
    if cfg.hidden == 0 {
        "linear".into()
    } else {
        format!("mlp{}", cfg.hidden)
    }
}

/// One freshly trained eavesdropper per grid point, scored on `test`.
/// Results follow the grid order.
pub fn eavesdropping_sweep(
    model: &dyn TransmitModel,
    train: &ImageSet,
    test: &ImageSet,
    snr_grid: &[f64],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<Vec<AttackResult>> {
    if snr_grid.is_empty() {
        return Err(Error::Input("the SNR grid is empty".into()));
    }
    if test.is_empty() {
        return Err(Error::Input("the test set is empty".into()));
    }
    let train_features = transmitted_codewords(model, train)?;
    let train_labels = train.private_labels(&train.all_indices());
    let test_features = transmitted_codewords(model, test)?;
    let test_labels = test.private_labels(&test.all_indices());
    let mut results = Vec::with_capacity(snr_grid.len());
    for &snr in snr_grid {
        let point_seed = rng::derive(seed, &format!("eve@{snr}"));
        let spec = ChannelSpec::new(snr, rng::derive(point_seed, "test-channel"))?;
        let eve = fit_classifier(
            &train_features,
            &train_labels,
            train.private_categories(),
            spec.sigma()?,
            cfg,
            point_seed,
        )?;
        let heard = awgn_transmit(&test_features, &spec)?;
        let acc = accuracy(&eve.predict(&heard)?, &test_labels)?;
        log::info!("{} eavesdropper at {snr} dB: accuracy {acc:.3}", model.model_id());
        results.push(AttackResult {
            snr_ae_db: snr,
            eavesdrop_accuracy: acc,
            attacker: attacker_descriptor(cfg),
            n_test: test.len(),
        });
    }
    Ok(results)
}

/// PSNR in dB for unit-range images; `+inf` when `mse == 0`.
pub fn psnr_db(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Serialises `±inf` as the strings `"inf"`/`"-inf"`; JSON has no infinity.
mod infinite_as_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got `{t}`"))),
        }
    }
}

/// Reconstruction quality at Bob plus any attack results for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub model_id: String,
    /// `+inf` for a noiseless link, serialised like `psnr`.
    #[serde(with = "infinite_as_text")]
    pub snr_ab_db: f64,
    pub mse: f64,
    /// `+inf` (serialised as `"inf"`) for a perfect reconstruction.
    #[serde(with = "infinite_as_text")]
    pub psnr: f64,
    pub attacks: Vec<AttackResult>,
}

/// Reconstructions of every image of `data` after Bob's channel.
pub fn reconstruct_set(model: &dyn TransmitModel, data: &ImageSet, spec: &ChannelSpec) -> Result<Tensor> {
    let sigma = spec.sigma()?;
    let mut noise = NoiseSource::new(spec.seed);
    let mut parts = Vec::new();
    for batch in sequential_batches(data.len(), EVAL_BATCH) {
        let y = model.transmitted(&data.batch_tensor(&batch, &Device::Cpu)?)?;
        parts.push(model.reconstruct(&noise.transmit(&y, sigma)?)?.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Mean squared error and PSNR over `data` at Bob's SNR.
pub fn reconstruction_metrics(
    model: &dyn TransmitModel,
    data: &ImageSet,
    spec: &ChannelSpec,
) -> Result<MetricsRecord> {
    if data.is_empty() {
        return Err(Error::Input("cannot measure reconstructions of an empty set".into()));
    }
    let originals = images_tensor(data)?;
    let recon = reconstruct_set(model, data, spec)?;
    let mse = (originals.to_dtype(DType::F64)? - recon.to_dtype(DType::F64)?)?
        .sqr()?
        .mean_all()?
        .to_scalar::<f64>()?;
    Ok(MetricsRecord {
        model_id: model.model_id(),
        snr_ab_db: spec.snr_db,
        mse,
        psnr: psnr_db(mse),
        attacks: Vec::new(),
    })
}

/// All images of `data` as one `(N, C, H, W)` tensor.
pub fn images_tensor(data: &ImageSet) -> Result<Tensor> {
    data.batch_tensor(&data.all_indices(), &Device::Cpu)
}

/// Held-out accuracies of the four disentanglement probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTable {
    pub private_from_y_t: f64,
    pub public_from_y_t: f64,
    pub private_from_y_s: f64,
    pub public_from_y_s: f64,
}

fn encode_set(data: &ImageSet, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let mut parts = Vec::new();
    for batch in sequential_batches(data.len(), EVAL_BATCH) {
        parts.push(f(&data.batch_tensor(&batch, &Device::Cpu)?)?.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Trains shallow probes on the clean subcodewords of `train` and scores
/// them on `test`: (y_t → private), (y_t → public), (y_s → private),
/// (y_s → public).
pub fn probe_disentanglement(
    model: &ModelBundle,
    train: &ImageSet,
    test: &ImageSet,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<ProbeTable> {
    if model.stage() < Stage::Stage1 {
        return Err(Error::Precondition("probing needs a trained codec".into()));
    }
    let codes = |data: &ImageSet| -> Result<(Tensor, Tensor)> {
        Ok((
            encode_set(data, |x| model.public_encode(x))?,
            encode_set(data, |x| model.private_encode(x))?,
        ))
    };
    let (train_t, train_s) = codes(train)?;
    let (test_t, test_s) = codes(test)?;
    let all_train = train.all_indices();
    let all_test = test.all_indices();
    let probe = |features: &Tensor, test_features: &Tensor, private: bool, label: &str| -> Result<f64> {
        let (labels, truth, classes) = if private {
            (train.private_labels(&all_train), test.private_labels(&all_test), train.private_categories())
        } else {
            (train.public_labels(&all_train), test.public_labels(&all_test), train.public_categories())
        };
        let clf = fit_classifier(features, &labels, classes, 0.0, cfg, rng::derive(seed, label))?;
        accuracy(&clf.predict(test_features)?, &truth)
    };
    Ok(ProbeTable {
        private_from_y_t: probe(&train_t, &test_t, true, "y_t/private")?,
        public_from_y_t: probe(&train_t, &test_t, false, "y_t/public")?,
        private_from_y_s: probe(&train_s, &test_s, true, "y_s/private")?,
        public_from_y_s: probe(&train_s, &test_s, false, "y_s/public")?,
    })
}

fn write_embedding_csv(path: &Path, prefix: &str, codes: &Tensor, data: &ImageSet) -> Result<()> {
    let rows = codes.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    let width = codes.dim(1)?;
    let file = File::create(path).map_err(Error::io(path))?;
    let mut out = BufWriter::new(file);
    let mut header: Vec<String> = (0..width).map(|i| format!("{prefix}_{i}")).collect();
    header.push("public_label".into());
    header.push("private_label".into());
    let io = Error::io(path);
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "{}", header.join(","))?;
        for (row, image) in rows.iter().zip(data.images()) {
            let values: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(
                out,
                "{},{},{}",
                values.join(","),
                image.public_label,
                image.private_label
            )?;
        }
        out.flush()
    };
    write().map_err(io)
}

/// Writes `y_t.csv` and `y_s.csv` into `dir`: a header row, one row per
/// image with the subcodeword values, then the public and private labels.
pub fn export_embeddings(model: &ModelBundle, data: &ImageSet, dir: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    if model.stage() < Stage::Stage1 {
        return Err(Error::Precondition("embedding export needs a trained codec".into()));
    }
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let y_t = encode_set(data, |x| model.public_encode(x))?;
    let y_s = encode_set(data, |x| model.private_encode(x))?;
    let t_path = dir.join("y_t.csv");
    let s_path = dir.join("y_s.csv");
    write_embedding_csv(&t_path, "y_t", &y_t, data)?;
    write_embedding_csv(&s_path, "y_s", &y_s, data)?;
    Ok((t_path, s_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledImage;
    use crate::nn::Architecture;

    fn tiny_set(n: usize, seed: u64) -> ImageSet {
        let shape = ImageShape::rgb(8, 8);
        let mut r = rng::seeded(seed);
        let images = (0..n)
            .map(|i| LabeledImage {
                pixels: (0..shape.len()).map(|_| rand::Rng::random::<f32>(&mut r)).collect(),
                public_label: (i % 3) as u32,
                private_label: (i % 5) as u32,
            })
            .collect();
        ImageSet::new(shape, 3, 5, images).unwrap()
    }

    fn tiny_arch() -> Architecture {
        Architecture {
            image: ImageShape::rgb(8, 8),
            m_t: 6,
            m_s: 3,
            private_categories: 5,
            encoder_channels: vec![4, 4],
            private_encoder_channels: vec![2, 2],
            decoder_channels: [4, 4],
            head_hidden: 8,
            discriminator_floor: 1e-6,
        }
    }

    #[test]
    fn deployed_codewords_zero_private_positions() {
        let mut m = ModelBundle::new(tiny_arch(), 1).unwrap();
        let x = images_tensor(&tiny_set(7, 1)).unwrap();
        assert!(matches!(m.transmitted(&x), Err(Error::Precondition(_))));
        m.set_stage(Stage::Finetune);
        let y = m.transmitted(&x).unwrap();
        assert_eq!(y.dims(), &[7, 9]);
        for row in y.to_vec2::<f32>().unwrap() {
            assert!(row[6..].iter().all(|&v| v == 0.0));
        }
        let heard = transmit_for_eval(&m, &x, &ChannelSpec::noiseless(3)).unwrap();
        assert_eq!(heard.to_vec2::<f32>().unwrap(), y.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn identity_link_is_perfect() {
        let data = tiny_set(10, 2);
        let id = IdentityTransmission { shape: data.shape() };
        let rec = reconstruction_metrics(&id, &data, &ChannelSpec::noiseless(0)).unwrap();
        assert_eq!(rec.mse, 0.0);
        assert_eq!(rec.psnr, f64::INFINITY);
        let json = serde_json::to_string(&rec).unwrap();
        let back: MetricsRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn psnr_is_consistent_with_mse() {
        for mse in [1.0, 0.1, 0.0123, 1e-6] {
            assert!((psnr_db(mse) - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_codewords_are_deterministic_and_input_keyed() {
        let data = tiny_set(6, 3);
        let noise = NoiseCodewords {
            shape: data.shape(),
            len: 9,
            seed: 4,
        };
        let a = transmitted_codewords(&noise, &data).unwrap().to_vec2::<f32>().unwrap();
        let b = transmitted_codewords(&noise, &data).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a, b);
        let other = transmitted_codewords(&noise, &tiny_set(6, 9)).unwrap().to_vec2::<f32>().unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn sweep_needs_a_grid() {
        let data = tiny_set(6, 3);
        let noise = NoiseCodewords {
            shape: data.shape(),
            len: 4,
            seed: 4,
        };
        let cfg = ClassifierConfig {
            epochs: 1,
            ..Default::default()
        };
        assert!(eavesdropping_sweep(&noise, &data, &data, &[], &cfg, 0).is_err());
        let r = eavesdropping_sweep(&noise, &data, &data, &[0.0, 5.0], &cfg, 0).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[1].snr_ae_db, 5.0);
        assert!(r.iter().all(|a| (0.0..=1.0).contains(&a.eavesdrop_accuracy) && a.n_test == 6));
    }

    #[test]
    fn embeddings_have_documented_schema_and_are_stable() {
        let data = tiny_set(5, 5);
        let mut m = ModelBundle::new(tiny_arch(), 2).unwrap();
        m.set_stage(Stage::Stage1);
        let dir = tempfile::tempdir().unwrap();
        let (t, s) = export_embeddings(&m, &data, dir.path()).unwrap();
        let text = std::fs::read_to_string(&t).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + data.len());
        assert_eq!(lines[0].split(',').count(), 6 + 2);
        assert!(lines[0].ends_with("public_label,private_label"));
        let s_text = std::fs::read_to_string(&s).unwrap();
        assert_eq!(s_text.lines().next().unwrap().split(',').count(), 3 + 2);
        export_embeddings(&m, &data, dir.path()).unwrap();
        assert_eq!(std::fs::read_to_string(&t).unwrap(), text);
    }
}
