use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::{
    checkpoint, Architecture, ConvDecoder, ConvEncoder, Mlp, ParamBuilder, ParamStore, SimplexEncoder,
};
use crate::error::{Error, Result};
use crate::rng;

/// Training-stage provenance of a [`ModelBundle`]. Ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initialized,
    Stage1,
    Stage2,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Initialized => "initialized",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Ok(match s {
            "initialized" => Stage::Initialized,
            "stage1" => Stage::Stage1,
            "stage2" => Stage::Stage2,
            "finetune" => Stage::Finetune,
            other => return Err(Error::Input(format!("unknown stage `{other}`"))),
        })
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The five parameter groups of the disentangled codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    /// φ_t
    PublicEncoder,
    /// φ_s
    PrivateEncoder,
    /// θ_B
    Decoder,
    /// γ
    Classifier,
    /// ε
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::PublicEncoder,
        ParamGroup::PrivateEncoder,
        ParamGroup::Decoder,
        ParamGroup::Classifier,
        ParamGroup::Discriminator,
    ];

    pub fn key(self) -> &'static str {
        match self {
            ParamGroup::PublicEncoder => "phi_t",
            ParamGroup::PrivateEncoder => "phi_s",
            ParamGroup::Decoder => "theta_b",
            ParamGroup::Classifier => "gamma",
            ParamGroup::Discriminator => "epsilon",
        }
    }
}

/// Public encoder f_φt, private encoder f_φs, decoder D_θB, private
/// classifier C_γ and dependence discriminator Dis_ε, with provenance.
///
/// All forward maps are deterministic given the parameters.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    arch: Architecture,
    stage: Stage,
    public_encoder: ConvEncoder,
    private_encoder: SimplexEncoder,
    decoder: ConvDecoder,
    classifier: Mlp,
    discriminator: Mlp,
    params: BTreeMap<ParamGroup, ParamStore>,
}

impl ModelBundle {
    /// Freshly initialised parameters; identical for identical `(arch, seed)`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let device = Device::Cpu;
        let mut params: BTreeMap<ParamGroup, ParamStore> = BTreeMap::new();
        let build = |group: ParamGroup| -> (ParamStore, rng::Rng) {
            (
                ParamStore::default(),
                rng::seeded(rng::derive(seed, group.key())),
            )
        };

        let (mut store, mut r) = build(ParamGroup::PublicEncoder);
        let public_encoder = ConvEncoder::new(
            &mut ParamBuilder::new(&mut store, &mut r, &device),
            arch.image,
            &arch.encoder_channels,
            arch.m_t,
        )?;
        params.insert(ParamGroup::PublicEncoder, store);

        let (mut store, mut r) = build(ParamGroup::PrivateEncoder);
        let private_encoder = SimplexEncoder::new(
            &mut ParamBuilder::new(&mut store, &mut r, &device),
            arch.image,
            &arch.private_encoder_channels,
            arch.private_categories,
            arch.m_s,
        )?;
        params.insert(ParamGroup::PrivateEncoder, store);

        let (mut store, mut r) = build(ParamGroup::Decoder);
        let decoder = ConvDecoder::new(
            &mut ParamBuilder::new(&mut store, &mut r, &device),
            arch.m(),
            arch.decoder_channels,
            arch.image,
        )?;
        params.insert(ParamGroup::Decoder, store);

        let (mut store, mut r) = build(ParamGroup::Classifier);
        let classifier = Mlp::new(
            &mut ParamBuilder::new(&mut store, &mut r, &device),
            arch.m_s,
            arch.head_hidden,
            arch.private_categories,
        )?;
        params.insert(ParamGroup::Classifier, store);

        let (mut store, mut r) = build(ParamGroup::Discriminator);
        let discriminator = Mlp::new(
            &mut ParamBuilder::new(&mut store, &mut r, &device),
            arch.m(),
            arch.head_hidden,
            1,
        )?;
        params.insert(ParamGroup::Discriminator, store);

        Ok(ModelBundle {
            arch,
            stage: Stage::Initialized,
            public_encoder,
            private_encoder,
            decoder,
            classifier,
            discriminator,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
    }

    pub fn params(&self, group: ParamGroup) -> &ParamStore {
        &self.params[&group]
    }

    pub fn checksum(&self, group: ParamGroup) -> Result<String> {
        self.params(group).checksum()
    }

    /// y_t = f_φt(x) for a `(B, C, H, W)` batch.
    pub fn public_encode(&self, x: &Tensor) -> Result<Tensor> {
        self.public_encoder.forward(x)
    }

    /// y_s = f_φs(x): an embedding of the encoder's belief about the
    /// private category (see [`SimplexEncoder`]).
    pub fn private_encode(&self, x: &Tensor) -> Result<Tensor> {
        self.private_encoder.forward(x)
    }

    /// Reconstructs images in [0, 1] from a `(B, M)` received codeword.
    pub fn decode(&self, y_hat: &Tensor) -> Result<Tensor> {
        self.decoder.forward(y_hat)
    }

    /// Raw scores of C_γ.
    pub fn classify_private_logits(&self, y_s: &Tensor) -> Result<Tensor> {
        self.classifier.forward(y_s)
    }

    /// C_γ(y_s): a probability vector over the S private categories.
    pub fn classify_private(&self, y_s: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(
            &self.classify_private_logits(y_s)?,
            D::Minus1,
        )?)
    }

    /// Raw output of Dis_ε: the log-odds that `(y_t, y_s)` was drawn
    /// jointly. Returns a `(B,)` tensor.
    pub fn discriminator_logits(&self, y_t: &Tensor, y_s: &Tensor) -> Result<Tensor> {
        if y_t.rank() != 2 || y_t.dim(1)? != self.arch.m_t {
            return Err(Error::Input(format!(
                "discriminator expects y_t of width {}, got {:?}",
                self.arch.m_t,
                y_t.dims()
            )));
        }
        if y_s.rank() != 2 || y_s.dim(1)? != self.arch.m_s || y_s.dim(0)? != y_t.dim(0)? {
            return Err(Error::Input(format!(
                "discriminator expects y_s of width {} and matching batch, got {:?}",
                self.arch.m_s,
                y_s.dims()
            )));
        }
        let joint = Tensor::cat(&[y_t, y_s], 1)?;
        Ok(self.discriminator.forward(&joint)?.squeeze(1)?)
    }

    /// Dis_ε(y_t, y_s): probability that the pair was drawn jointly,
    /// clamped to `[floor, 1 - floor]`. Returns a `(B,)` tensor.
    pub fn discriminate(&self, y_t: &Tensor, y_s: &Tensor) -> Result<Tensor> {
        let p = candle_nn::ops::sigmoid(&self.discriminator_logits(y_t, y_s)?)?;
        let floor = self.arch.discriminator_floor;
        Ok(p.clamp(floor, 1.0 - floor)?)
    }

    /// Saves every parameter group with architecture and stage metadata.
    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert("stage".into(), self.stage.as_str().into());
        let groups: Vec<(&str, &ParamStore)> = self
            .params
            .iter()
            .map(|(g, store)| (g.key(), store))
            .collect();
        checkpoint::save(path, "bundle", &self.architecture_json(), &groups, &meta)
    }

    /// Loads a bundle. When `expected` is given the stored descriptor must
    /// match it exactly.
    pub fn load(path: &Path, expected: Option<&Architecture>) -> Result<(Self, BTreeMap<String, String>)> {
        let loaded = checkpoint::load(path, "bundle")?;
        let arch: Architecture = serde_json::from_str(loaded.get("architecture")?)
            .map_err(|e| Error::format(path, format!("bad architecture descriptor: {e}")))?;
        if let Some(expected) = expected {
            if expected != &arch {
                return Err(Error::Config(format!(
                    "checkpoint {} was written for a different architecture",
                    path.display()
                )));
            }
        }
        let stage = Stage::parse(loaded.get("stage")?)?;
        let mut bundle = ModelBundle::new(arch, 0)?;
        for (group, store) in &bundle.params {
            store.assign(&loaded.tensors, &format!("{}.", group.key()))?;
        }
        let expected_tensors: usize = bundle.params.values().map(|s| s.iter().count()).sum();
        if expected_tensors != loaded.tensors.len() {
            return Err(Error::format(path, "checkpoint has unexpected extra tensors"));
        }
        bundle.stage = stage;
        Ok((bundle, loaded.metadata))
    }

    fn architecture_json(&self) -> String {
        serde_json::to_string(&self.arch).expect("architecture serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, IndexOp};

    fn small_arch() -> Architecture {
        Architecture {
            image: crate::data::ImageShape::rgb(8, 8),
            m_t: 6,
            m_s: 3,
            private_categories: 10,
            encoder_channels: vec![4, 4],
            private_encoder_channels: vec![2, 2],
            decoder_channels: [4, 4],
            head_hidden: 16,
            discriminator_floor: 1e-6,
        }
    }

    fn images(b: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        let v: Vec<f32> = (0..b * 3 * 64)
            .map(|_| rand::Rng::random::<f32>(&mut r))
            .collect();
        Tensor::from_vec(v, (b, 3, 8, 8), &Device::Cpu).unwrap()
    }

    #[test]
    fn shape_contracts() {
        let m = ModelBundle::new(small_arch(), 1).unwrap();
        let x = images(5, 2);
        let y_t = m.public_encode(&x).unwrap();
        let y_s = m.private_encode(&x).unwrap();
        assert_eq!(y_t.dims(), &[5, 6]);
        assert_eq!(y_s.dims(), &[5, 3]);
        let y = Tensor::cat(&[&y_t, &y_s], 1).unwrap();
        let x_hat = m.decode(&y).unwrap();
        assert_eq!(x_hat.dims(), x.dims());
        let zeros = Tensor::zeros((5, 3), DType::F32, &Device::Cpu).unwrap();
        let zeroed = m.decode(&Tensor::cat(&[&y_t, &zeros], 1).unwrap()).unwrap();
        let v = zeroed.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(m.decode(&y_t).is_err());
        assert!(m.classify_private(&y_t).is_err());
        assert!(m.discriminate(&y_s, &y_t).is_err());
    }

    #[test]
    fn forward_maps_are_deterministic() {
        let m = ModelBundle::new(small_arch(), 1).unwrap();
        let x = images(4, 3);
        let a = m.public_encode(&x).unwrap().to_vec2::<f32>().unwrap();
        let b = m.public_encode(&x).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a, b);
        let a = m.private_encode(&x).unwrap().to_vec2::<f32>().unwrap();
        let b = m.private_encode(&x).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn classifier_outputs_simplex_near_uniform_at_init() {
        let m = ModelBundle::new(small_arch(), 4).unwrap();
        let y_s = m.private_encode(&images(32, 5)).unwrap();
        let p = m.classify_private(&y_s).unwrap().to_vec2::<f32>().unwrap();
        for row in p {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!(row.iter().cloned().fold(0.0, f32::max) < 0.5);
        }
    }

    #[test]
    fn discriminator_in_open_interval_and_centered_at_init() {
        let m = ModelBundle::new(small_arch(), 6).unwrap();
        let mut r = rng::seeded(8);
        let big: Vec<f32> = (0..64 * 9)
            .map(|_| (rand::Rng::random::<f32>(&mut r) - 0.5) * 2.0)
            .collect();
        let y = Tensor::from_vec(big, (64, 9), &Device::Cpu).unwrap();
        let p = m.discriminate(&y.i((.., ..6)).unwrap(), &y.i((.., 6..)).unwrap()).unwrap();
        let v = p.to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
        let mean = v.iter().sum::<f32>() / v.len() as f32;
        assert!((mean - 0.5).abs() < 0.1, "mean {mean}");
        let huge = (y * 1e6).unwrap();
        let p = m.discriminate(&huge.i((.., ..6)).unwrap(), &huge.i((.., 6..)).unwrap()).unwrap();
        assert!(p.to_vec1::<f32>().unwrap().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.safetensors");
        let mut m = ModelBundle::new(small_arch(), 9).unwrap();
        m.set_stage(Stage::Stage2);
        m.save(&path, &BTreeMap::from([("config_hash".to_string(), "h".to_string())]))
            .unwrap();
        let (back, meta) = ModelBundle::load(&path, Some(&small_arch())).unwrap();
        assert_eq!(meta["config_hash"], "h");
        assert_eq!(back.stage(), Stage::Stage2);
        for g in ParamGroup::ALL {
            assert_eq!(back.checksum(g).unwrap(), m.checksum(g).unwrap());
        }
        let x = images(3, 1);
        let a = m.public_encode(&x).unwrap().to_vec2::<f32>().unwrap();
        let b = back.public_encode(&x).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a, b);

        let other = Architecture {
            m_t: 7,
            ..small_arch()
        };
        assert!(ModelBundle::load(&path, Some(&other)).is_err());
    }
}
