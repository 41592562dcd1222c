//! Labelled image datasets: colored MNIST synthesis, UTK Face ingestion,
//! deterministic splits, batching and the on-disk cache.

mod cache;
mod mnist;
mod utkface;

pub use cache::{read_cache, read_manifest, write_cache, CacheManifest, CACHE_FORMAT_VERSION};
pub use mnist::{load_idx, synthesize_colored_mnist, GrayscaleDigits, Palette, Rgb};
pub use utkface::{load_utkface, UtkFaceLoad};

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn rgb(height: usize, width: usize) -> Self {
        ImageShape {
            height,
            width,
            channels: 3,
        }
    }

    /// Number of scalar values per image (N).
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One image with its public and private labels.
///
/// `pixels` is stored row-major in height × width × channel order, every
/// value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f32>,
    pub public_label: u32,
    pub private_label: u32,
}

/// A validated collection of [`LabeledImage`]s sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    shape: ImageShape,
    public_categories: usize,
    private_categories: usize,
    images: Vec<LabeledImage>,
}

impl ImageSet {
    pub fn new(
        shape: ImageShape,
        public_categories: usize,
        private_categories: usize,
        images: Vec<LabeledImage>,
    ) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Input("image shape has zero size".into()));
        }
        for (i, image) in images.iter().enumerate() {
            if image.pixels.len() != shape.len() {
                return Err(Error::Input(format!(
                    "image {i} has {} values, expected {}",
                    image.pixels.len(),
                    shape.len()
                )));
            }
            if image.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Input(format!("image {i} has pixels outside [0, 1]")));
            }
            if image.private_label as usize >= private_categories {
                return Err(Error::Input(format!(
                    "image {i} has private label {} but only {private_categories} categories",
                    image.private_label
                )));
            }
            if image.public_label as usize >= public_categories {
                return Err(Error::Input(format!(
                    "image {i} has public label {} but only {public_categories} categories",
                    image.public_label
                )));
            }
        }
        Ok(ImageSet {
            shape,
            public_categories,
            private_categories,
            images,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn public_categories(&self) -> usize {
        self.public_categories
    }

    /// S, the number of private categories.
    pub fn private_categories(&self) -> usize {
        self.private_categories
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[LabeledImage] {
        &self.images
    }

    pub fn get(&self, index: usize) -> Option<&LabeledImage> {
        self.images.get(index)
    }

    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        ImageSet {
            shape: self.shape,
            public_categories: self.public_categories,
            private_categories: self.private_categories,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }

    /// The first `n` images (or all of them).
    pub fn head(&self, n: usize) -> ImageSet {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// Stacks the selected images into a `(B, C, H, W)` f32 tensor.
    pub fn batch_tensor(&self, indices: &[usize], device: &Device) -> Result<Tensor> {
        let ImageShape {
            height,
            width,
            channels,
        } = self.shape;
        let plane = height * width;
        let mut data = vec![0f32; indices.len() * self.shape.len()];
        for (b, &i) in indices.iter().enumerate() {
            let src = &self.images[i].pixels;
            let dst = &mut data[b * self.shape.len()..(b + 1) * self.shape.len()];
            for p in 0..plane {
                for c in 0..channels {
                    dst[c * plane + p] = src[p * channels + c];
                }
            }
        }
        Ok(Tensor::from_vec(
            data,
            (indices.len(), channels, height, width),
            device,
        )?)
    }

    pub fn private_labels(&self, indices: &[usize]) -> Vec<u32> {
        indices.iter().map(|&i| self.images[i].private_label).collect()
    }

    pub fn public_labels(&self, indices: &[usize]) -> Vec<u32> {
        indices.iter().map(|&i| self.images[i].public_label).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Per-value dataset mean (the best constant predictor under MSE).
    pub fn pixel_mean(&self) -> Vec<f64> {
        let mut mean = vec![0f64; self.shape.len()];
        for image in &self.images {
            for (m, &v) in mean.iter_mut().zip(&image.pixels) {
                *m += v as f64;
            }
        }
        let n = self.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// MSE of the per-pixel mean predictor, i.e. the average per-pixel variance.
    pub fn constant_predictor_mse(&self) -> f64 {
        let mean = self.pixel_mean();
        let mut total = 0f64;
        for image in &self.images {
            for (&m, &v) in mean.iter().zip(&image.pixels) {
                let d = v as f64 - m;
                total += d * d;
            }
        }
        total / (self.len().max(1) * self.shape.len()) as f64
    }

    /// SHA-256 over shape, labels and pixel bytes.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in [
            self.shape.height,
            self.shape.width,
            self.shape.channels,
            self.public_categories,
            self.private_categories,
            self.len(),
        ] {
            hasher.update((v as u64).to_le_bytes());
        }
        for image in &self.images {
            hasher.update(image.public_label.to_le_bytes());
            hasher.update(image.private_label.to_le_bytes());
            for v in &image.pixels {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    ColoredMnist,
    Utkface,
}

impl DatasetName {
    /// The declared private-category count S.
    pub fn private_categories(self) -> usize {
        match self {
            DatasetName::ColoredMnist => 10,
            DatasetName::Utkface => 5,
        }
    }

    pub fn public_categories(self) -> usize {
        match self {
            DatasetName::ColoredMnist => 10,
            // gender
            DatasetName::Utkface => 2,
        }
    }
}

/// Train / validation / test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            validation: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub private_categories: usize,
    pub shape: ImageShape,
    #[serde(default)]
    pub split: SplitFractions,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn colored_mnist(seed: u64) -> Self {
        DatasetSpec {
            name: DatasetName::ColoredMnist,
            private_categories: 10,
            shape: ImageShape::rgb(28, 28),
            split: SplitFractions::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.split;
        let fractions = [f.train, f.validation, f.test];
        if fractions.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Config(format!(
                "split fractions must be positive, got {fractions:?}"
            )));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        if self.private_categories != self.name.private_categories() {
            return Err(Error::Config(format!(
                "{:?} declares {} private categories, got {}",
                self.name,
                self.name.private_categories(),
                self.private_categories
            )));
        }
        if self.shape.channels != 3 || self.shape.height % 4 != 0 || self.shape.width % 4 != 0 {
            return Err(Error::Config(format!(
                "image shape must be RGB with sides divisible by 4, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: ImageSet,
    pub validation: ImageSet,
    pub test: ImageSet,
}

/// Index assignment behind [`split_dataset`], exposed for inspection.
pub fn split_indices(n: usize, spec: &DatasetSpec) -> Result<[Vec<usize>; 3]> {
    spec.validate()?;
    let n_val = (n as f64 * spec.split.validation).round() as usize;
    let n_test = (n as f64 * spec.split.test).round() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Config(format!(
            "split of {n} items yields an empty part ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(rng::derive(spec.seed, "split")));
    let test = order.split_off(n_train + n_val);
    let validation = order.split_off(n_train);
    Ok([order, validation, test])
}

/// Disjoint, exhaustive, seed-deterministic partition of `data`.
pub fn split_dataset(data: &ImageSet, spec: &DatasetSpec) -> Result<Splits> {
    let [train, validation, test] = split_indices(data.len(), spec)?;
    Ok(Splits {
        train: data.subset(&train),
        validation: data.subset(&validation),
        test: data.subset(&test),
    })
}

/// Shuffled mini-batches of indices for one epoch.
///
/// A trailing batch with fewer than two items is dropped, since the
/// batch-permutation estimator needs at least two rows.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut rng::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

/// Consecutive (unshuffled) batches covering every index.
pub fn sequential_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn toy(n: usize) -> ImageSet {
        let images = (0..n)
            .map(|i| LabeledImage {
                pixels: vec![(i % 7) as f32 / 7.0; 4 * 4 * 3],
                public_label: (i % 10) as u32,
                private_label: (i % 10) as u32,
            })
            .collect();
        ImageSet::new(ImageShape::rgb(4, 4), 10, 10, images).unwrap()
    }

    fn spec(train: f64, validation: f64, test: f64) -> DatasetSpec {
        DatasetSpec {
            shape: ImageShape::rgb(4, 4),
            split: SplitFractions {
                train,
                validation,
                test,
            },
            ..DatasetSpec::colored_mnist(3)
        }
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let [a, b, c] = split_indices(100, &spec(0.8, 0.1, 0.1)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
    }

    #[test]
    fn split_is_a_partition_and_reproducible() {
        let data = toy(57);
        let s = spec(0.6, 0.2, 0.2);
        let parts = split_indices(data.len(), &s).unwrap();
        let all: BTreeSet<usize> = parts.iter().flatten().copied().collect();
        assert_eq!(all.len(), 57);
        assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), 57);
        assert_eq!(parts, split_indices(data.len(), &s).unwrap());
        let other = split_indices(data.len(), &DatasetSpec { seed: 4, ..s }).unwrap();
        assert_ne!(parts, other);
    }

    #[test]
    fn bad_fractions_are_rejected() {
        assert!(matches!(
            split_indices(100, &spec(0.8, 0.1, 0.2)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            split_indices(100, &spec(1.0, 0.0, 0.0)),
            Err(Error::Config(_))
        ));
        // 3 items at 0.8/0.1/0.1 leave the validation split empty
        assert!(matches!(
            split_indices(3, &spec(0.8, 0.1, 0.1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invariants_are_enforced() {
        let bad_pixel = LabeledImage {
            pixels: vec![1.5; 48],
            public_label: 0,
            private_label: 0,
        };
        assert!(ImageSet::new(ImageShape::rgb(4, 4), 10, 10, vec![bad_pixel]).is_err());
        let bad_label = LabeledImage {
            pixels: vec![0.5; 48],
            public_label: 0,
            private_label: 5,
        };
        assert!(ImageSet::new(ImageShape::rgb(4, 4), 2, 5, vec![bad_label]).is_err());
    }

    #[test]
    fn batch_tensor_is_channel_major() {
        let mut images = toy(2).images().to_vec();
        images[0].pixels = (0..48).map(|v| v as f32 / 48.0).collect();
        let set = ImageSet::new(ImageShape::rgb(4, 4), 10, 10, images).unwrap();
        let t = set.batch_tensor(&[0], &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 4, 4]);
        let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // channel 1 of pixel 0 sits at offset 16 (one plane in)
        assert_eq!(v[16], 1.0 / 48.0);
        assert_eq!(v[1], 3.0 / 48.0);
    }

    #[test]
    fn epoch_batches_cover_and_drop_singletons() {
        let mut r = rng::seeded(1);
        let batches = epoch_batches(9, 4, &mut r);
        assert_eq!(batches.len(), 2);
        let seen: BTreeSet<usize> = batches.iter().flatten().copied().collect();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn constant_predictor_mse_matches_variance() {
        let images = vec![
            LabeledImage {
                pixels: vec![0.0; 48],
                public_label: 0,
                private_label: 0,
            },
            LabeledImage {
                pixels: vec![1.0; 48],
                public_label: 0,
                private_label: 0,
            },
        ];
        let set = ImageSet::new(ImageShape::rgb(4, 4), 10, 10, images).unwrap();
        assert!((set.constant_predictor_mse() - 0.25).abs() < 1e-12);
    }
}
