//! Trainable parametric maps: convolutional encoders, the transposed-conv
//! decoder and the small fully connected heads (private classifier,
//! dependence discriminator, eavesdropper and probes).

mod bundle;
pub mod checkpoint;
mod classifier;

pub use bundle::{ModelBundle, ParamGroup, Stage};
pub use classifier::{
    accuracy, fit_classifier, fit_image_classifier, ClassifierConfig, FeatureClassifier,
    ImageClassifier,
};

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, Linear};
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::rng;

/// Shape descriptor from which every parameter set can be rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub image: ImageShape,
    /// Length of the public subcodeword y_t.
    pub m_t: usize,
    /// Length of the private subcodeword y_s.
    pub m_s: usize,
    pub private_categories: usize,
    pub encoder_channels: Vec<usize>,
    pub private_encoder_channels: Vec<usize>,
    pub decoder_channels: [usize; 2],
    /// Hidden width of the classifier and discriminator heads.
    pub head_hidden: usize,
    /// Discriminator outputs are clamped to `[floor, 1 - floor]`.
    pub discriminator_floor: f64,
}

impl Architecture {
    /// Defaults for 28×28 colored MNIST: M_t = 48, M_s = 16.
    pub fn colored_mnist() -> Self {
        Architecture {
            image: ImageShape::rgb(28, 28),
            m_t: 48,
            m_s: 16,
            private_categories: 10,
            encoder_channels: vec![16, 32, 32],
            private_encoder_channels: vec![8, 16, 16],
            decoder_channels: [32, 16],
            head_hidden: 128,
            discriminator_floor: 1e-6,
        }
    }

    /// Total codeword length M = M_t + M_s.
    pub fn m(&self) -> usize {
        self.m_t + self.m_s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image.channels != 3 || self.image.height % 4 != 0 || self.image.width % 4 != 0 {
            return bad(format!("unsupported image shape {:?}", self.image));
        }
        if self.m_t == 0 || self.m_s == 0 {
            return bad("m_t and m_s must be positive".into());
        }
        if self.private_categories < 2 {
            return bad("need at least two private categories".into());
        }
        if self.encoder_channels.len() < 2 || self.private_encoder_channels.len() < 2 {
            return bad("encoders need at least two conv layers".into());
        }
        let widths = self
            .encoder_channels
            .iter()
            .chain(&self.private_encoder_channels)
            .chain(&self.decoder_channels)
            .chain([&self.head_hidden]);
        if widths.into_iter().any(|&w| w == 0) {
            return bad("layer widths must be positive".into());
        }
        if !(self.discriminator_floor > 0.0 && self.discriminator_floor < 0.5) {
            return bad("discriminator floor must lie in (0, 0.5)".into());
        }
        Ok(())
    }
}

/// Named trainable variables of one parameter group, in a fixed order.
#[derive(Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.vars.len())
            .field("parameters", &self.num_parameters())
            .finish()
    }
}

impl ParamStore {
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and raw values; equal iff bitwise equal.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in var.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Overwrites every variable from `tensors[prefix + name]`.
    pub fn assign(&self, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Input(format!("checkpoint lacks tensor {key}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Input(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    /// Copies every value from `other`, which must have identical layout.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        let tensors = other
            .vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        self.assign(&tensors, "")
    }
}

/// Creates parameters with PyTorch-style uniform initialisation from a
/// seeded stream.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut rng::Rng,
    prefix: String,
    device: Device,
    dtype: DType,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut rng::Rng, device: &Device) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
            device: device.clone(),
            dtype: DType::F32,
        }
    }

    pub fn with_prefix(&mut self, prefix: &str) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}{prefix}.", self.prefix),
            device: self.device.clone(),
            dtype: self.dtype,
        }
    }

    fn uniform(&mut self, name: &str, dims: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let values: Vec<f32> = (0..n).map(|_| dist.sample(self.rng) as f32).collect();
        let var = Var::from_tensor(&Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?)?;
        let tensor = var.as_tensor().clone();
        self.store.vars.insert(format!("{}{name}", self.prefix), var);
        Ok(tensor)
    }

    pub fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Result<Linear> {
        let bound = 1.0 / (inputs as f64).sqrt();
        let w = self.uniform(&format!("{name}.weight"), &[outputs, inputs], bound)?;
        let b = self.uniform(&format!("{name}.bias"), &[outputs], bound)?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        config: Conv2dConfig,
    ) -> Result<Conv2d> {
        let bound = 1.0 / ((inputs * kernel * kernel) as f64).sqrt();
        let w = self.uniform(&format!("{name}.weight"), &[outputs, inputs, kernel, kernel], bound)?;
        let b = self.uniform(&format!("{name}.bias"), &[outputs], bound)?;
        Ok(Conv2d::new(w, Some(b), config))
    }

    pub fn conv_transpose2d(
        &mut self,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        config: ConvTranspose2dConfig,
    ) -> Result<ConvTranspose2d> {
        let bound = 1.0 / ((outputs * kernel * kernel) as f64).sqrt();
        let w = self.uniform(&format!("{name}.weight"), &[inputs, outputs, kernel, kernel], bound)?;
        let b = self.uniform(&format!("{name}.bias"), &[outputs], bound)?;
        Ok(ConvTranspose2d::new(w, Some(b), config))
    }
}

fn expect_dims(x: &Tensor, expected: &[usize], what: &str) -> Result<()> {
    let dims = x.dims();
    if dims.len() != expected.len() + 1 || &dims[1..] != expected {
        return Err(Error::Input(format!(
            "{what} expects (B, {}) input, got {dims:?}",
            expected
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    Ok(())
}

/// Strided conv stack followed by a linear projection to `outputs` values.
///
/// The first two convolutions halve the spatial size, later ones keep it.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    convs: Vec<Conv2d>,
    head: Linear,
    input: ImageShape,
    outputs: usize,
}

impl ConvEncoder {
    pub fn new(
        b: &mut ParamBuilder,
        input: ImageShape,
        channels: &[usize],
        outputs: usize,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(channels.len());
        let mut previous = input.channels;
        for (i, &c) in channels.iter().enumerate() {
            let config = Conv2dConfig {
                stride: if i < 2 { 2 } else { 1 },
                padding: 1,
                ..Default::default()
            };
            convs.push(b.conv2d(&format!("conv{i}"), previous, c, 3, config)?);
            previous = c;
        }
        let flat = previous * (input.height / 4) * (input.width / 4);
        let head = b.linear("proj", flat, outputs)?;
        Ok(ConvEncoder {
            convs,
            head,
            input,
            outputs,
        })
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        expect_dims(
            x,
            &[self.input.channels, self.input.height, self.input.width],
            "encoder",
        )?;
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
        }
        Ok(self.head.forward(&h.flatten_from(1)?)?)
    }
}

/// Conv encoder whose output is a normalised log-distribution over
/// `categories` units, followed by a linear embedding into `outputs`
/// values.
///
/// The normalisation is an information bottleneck: whatever the encoder
/// emits is a function of one point on the probability simplex over the
/// private categories, so it cannot carry image content beyond its belief
/// about the category. Log-probabilities rather than probabilities keep
/// the embedding well conditioned at initialisation.
#[derive(Debug, Clone)]
pub struct SimplexEncoder {
    trunk: ConvEncoder,
    embed: Linear,
}

impl SimplexEncoder {
    pub fn new(
        b: &mut ParamBuilder,
        input: ImageShape,
        channels: &[usize],
        categories: usize,
        outputs: usize,
    ) -> Result<Self> {
        let trunk = ConvEncoder::new(&mut b.with_prefix("trunk"), input, channels, categories)?;
        let embed = b.linear("embed", categories, outputs)?;
        Ok(SimplexEncoder { trunk, embed })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let p = candle_nn::ops::log_softmax(&self.trunk.forward(x)?, candle_core::D::Minus1)?;
        Ok(self.embed.forward(&p)?)
    }
}

/// Linear lift to a quarter-resolution feature map, then two stride-2
/// transposed convolutions and a sigmoid so outputs stay in [0, 1].
#[derive(Debug, Clone)]
pub struct ConvDecoder {
    lift: Linear,
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
    inputs: usize,
    channels: usize,
    output: ImageShape,
}

impl ConvDecoder {
    pub fn new(
        b: &mut ParamBuilder,
        inputs: usize,
        channels: [usize; 2],
        output: ImageShape,
    ) -> Result<Self> {
        let lift = b.linear(
            "lift",
            inputs,
            channels[0] * (output.height / 4) * (output.width / 4),
        )?;
        let config = ConvTranspose2dConfig {
            stride: 2,
            padding: 1,
            ..Default::default()
        };
        let up1 = b.conv_transpose2d("up1", channels[0], channels[1], 4, config)?;
        let up2 = b.conv_transpose2d("up2", channels[1], output.channels, 4, config)?;
        Ok(ConvDecoder {
            lift,
            up1,
            up2,
            inputs,
            channels: channels[0],
            output,
        })
    }

    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        expect_dims(y, &[self.inputs], "decoder")?;
        let batch = y.dim(0)?;
        let h = self.lift.forward(y)?.relu()?.reshape((
            batch,
            self.channels,
            self.output.height / 4,
            self.output.width / 4,
        ))?;
        let h = self.up1.forward(&h)?.relu()?;
        Ok(candle_nn::ops::sigmoid(&self.up2.forward(&h)?)?)
    }
}

/// Two-layer fully connected network returning raw scores.
#[derive(Debug, Clone)]
pub struct Mlp {
    hidden: Linear,
    out: Linear,
    inputs: usize,
}

impl Mlp {
    pub fn new(b: &mut ParamBuilder, inputs: usize, hidden: usize, outputs: usize) -> Result<Self> {
        Ok(Mlp {
            hidden: b.linear("fc1", inputs, hidden)?,
            out: b.linear("fc2", hidden, outputs)?,
            inputs,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        expect_dims(x, &[self.inputs], "fully connected head")?;
        let h = self.hidden.forward(x)?.relu()?;
        Ok(self.out.forward(&h)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_is_seed_deterministic() {
        let make = |seed| {
            let mut store = ParamStore::default();
            let mut r = rng::seeded(seed);
            let mut b = ParamBuilder::new(&mut store, &mut r, &Device::Cpu);
            Mlp::new(&mut b.with_prefix("m"), 4, 8, 2).unwrap();
            store.checksum().unwrap()
        };
        assert_eq!(make(1), make(1));
        assert_ne!(make(1), make(2));
    }

    #[test]
    fn shapes_are_checked() {
        let mut store = ParamStore::default();
        let mut r = rng::seeded(0);
        let mut b = ParamBuilder::new(&mut store, &mut r, &Device::Cpu);
        let mlp = Mlp::new(&mut b, 4, 8, 2).unwrap();
        let x = Tensor::zeros((3, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(mlp.forward(&x), Err(Error::Input(_))));
        let enc = ConvEncoder::new(&mut b.with_prefix("e"), ImageShape::rgb(8, 8), &[4, 4], 6).unwrap();
        let img = Tensor::zeros((2, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(enc.forward(&img).unwrap().dims(), &[2, 6]);
        let wrong = Tensor::zeros((2, 3, 4, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(enc.forward(&wrong).is_err());
    }

    #[test]
    fn default_architecture_is_valid() {
        let arch = Architecture::colored_mnist();
        arch.validate().unwrap();
        assert_eq!(arch.m(), 64);
        let bad = Architecture {
            discriminator_floor: 0.0,
            ..arch
        };
        assert!(bad.validate().is_err());
    }
}
