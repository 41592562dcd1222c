use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{ImageSet, ImageShape, LabeledImage};
use crate::error::{Error, Result};
use crate::rng;

static BUNDLED_IMAGES: &[u8] = include_bytes!("../../../../data/mnist10k-images-idx3-ubyte.gz");
static BUNDLED_LABELS: &[u8] = include_bytes!("../../../../data/mnist10k-labels-idx1-ubyte.gz");

/// Grayscale digit images with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayscaleDigits {
    pub height: usize,
    pub width: usize,
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<u32>,
}

impl GrayscaleDigits {
    /// The 10,000 MNIST digits shipped in `data/`.
    pub fn bundled() -> Result<Self> {
        parse_idx_pair(
            &gunzip(BUNDLED_IMAGES, Path::new("<bundled images>"))?,
            &gunzip(BUNDLED_LABELS, Path::new("<bundled labels>"))?,
            Path::new("<bundled>"),
        )
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        GrayscaleDigits {
            height: self.height,
            width: self.width,
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

fn gunzip(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(Error::io(path))?;
        Ok(out)
    } else {
        Ok(bytes.to_vec())
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn parse_idx_pair(images: &[u8], labels: &[u8], path: &Path) -> Result<GrayscaleDigits> {
    let bad = |reason: &str| Error::format(path, reason);
    if be_u32(images, 0) != Some(2051) {
        return Err(bad("image file lacks the IDX3 magic number"));
    }
    if be_u32(labels, 0) != Some(2049) {
        return Err(bad("label file lacks the IDX1 magic number"));
    }
    let n = be_u32(images, 4).ok_or_else(|| bad("truncated header"))? as usize;
    let height = be_u32(images, 8).ok_or_else(|| bad("truncated header"))? as usize;
    let width = be_u32(images, 12).ok_or_else(|| bad("truncated header"))? as usize;
    let n_labels = be_u32(labels, 4).ok_or_else(|| bad("truncated header"))? as usize;
    if n != n_labels {
        return Err(bad("image and label counts differ"));
    }
    let plane = height * width;
    if images.len() != 16 + n * plane || labels.len() != 8 + n {
        return Err(bad("payload length does not match header"));
    }
    let images = images[16..]
        .chunks_exact(plane)
        .map(|c| c.iter().map(|&v| v as f32 / 255.0).collect())
        .collect();
    let labels = labels[8..].iter().map(|&v| v as u32).collect();
    Ok(GrayscaleDigits {
        height,
        width,
        images,
        labels,
    })
}

/// Reads an IDX image/label file pair (optionally gzip-compressed), the
/// distribution format of MNIST.
pub fn load_idx(images: &Path, labels: &Path) -> Result<GrayscaleDigits> {
    let image_bytes = std::fs::read(images).map_err(Error::io(images))?;
    let label_bytes = std::fs::read(labels).map_err(Error::io(labels))?;
    parse_idx_pair(
        &gunzip(&image_bytes, images)?,
        &gunzip(&label_bytes, labels)?,
        images,
    )
}

pub type Rgb = [f32; 3];

/// The tint colours; the palette index of an image is its private label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Palette(pub Vec<Rgb>);

impl Default for Palette {
    /// Ten colours from the grid {0.4, 0.7, 1.0}³ with pairwise distance
    /// ≥ 0.42. The floor of 0.4 keeps a colour-blind reconstruction close to
    /// the true image.
    fn default() -> Self {
        Palette(vec![
            [1.0, 0.4, 0.4],
            [0.4, 1.0, 0.4],
            [0.4, 0.4, 1.0],
            [1.0, 1.0, 0.4],
            [1.0, 0.4, 1.0],
            [0.4, 1.0, 1.0],
            [1.0, 0.7, 0.7],
            [0.7, 1.0, 0.7],
            [0.7, 0.7, 1.0],
            [1.0, 1.0, 1.0],
        ])
    }
}

impl Palette {
    pub const SIZE: usize = 10;

    pub fn validate(&self) -> Result<()> {
        if self.0.len() != Self::SIZE {
            return Err(Error::Config(format!(
                "palette must hold exactly {} colours, got {}",
                Self::SIZE,
                self.0.len()
            )));
        }
        if self
            .0
            .iter()
            .flatten()
            .any(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            return Err(Error::Config("palette values must lie in [0, 1]".into()));
        }
        let distinct: BTreeSet<[u32; 3]> = self
            .0
            .iter()
            .map(|c| [c[0].to_bits(), c[1].to_bits(), c[2].to_bits()])
            .collect();
        if distinct.len() != Self::SIZE {
            return Err(Error::Config("palette colours must be distinct".into()));
        }
        Ok(())
    }

    pub fn min_pairwise_distance(&self) -> f32 {
        let mut best = f32::INFINITY;
        for (i, a) in self.0.iter().enumerate() {
            for b in &self.0[i + 1..] {
                let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>();
                best = best.min(d.sqrt());
            }
        }
        best
    }
}

/// Tints each grayscale digit with a uniformly drawn palette colour.
///
/// The grayscale intensity multiplies the colour channel-wise, so the
/// background stays black. The public label is the digit and the private
/// label is the palette index.
pub fn synthesize_colored_mnist(
    source: &GrayscaleDigits,
    palette: &Palette,
    seed: u64,
) -> Result<ImageSet> {
    palette.validate()?;
    if source.is_empty() {
        return Err(Error::Input("grayscale source is empty".into()));
    }
    if source.labels.len() != source.images.len() {
        return Err(Error::Input("source image and label counts differ".into()));
    }
    let plane = source.height * source.width;
    let mut rng = rng::seeded(rng::derive(seed, "colorize"));
    let mut images = Vec::with_capacity(source.len());
    for (gray, &digit) in source.images.iter().zip(&source.labels) {
        if gray.len() != plane {
            return Err(Error::Input("source image has the wrong size".into()));
        }
        if gray.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("source pixels must lie in [0, 1]".into()));
        }
        let color_index = rng.random_range(0..Palette::SIZE);
        let color = palette.0[color_index];
        let mut pixels = Vec::with_capacity(plane * 3);
        for &g in gray {
            pixels.extend(color.iter().map(|c| g * c));
        }
        images.push(LabeledImage {
            pixels,
            public_label: digit,
            private_label: color_index as u32,
        });
    }
    ImageSet::new(
        ImageShape::rgb(source.height, source.width),
        10,
        Palette::SIZE,
        images,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_source(n: usize) -> GrayscaleDigits {
        GrayscaleDigits {
            height: 2,
            width: 2,
            images: (0..n)
                .map(|i| vec![0.0, 0.25, (i % 5) as f32 / 4.0, 1.0])
                .collect(),
            labels: (0..n).map(|i| (i % 10) as u32).collect(),
        }
    }

    #[test]
    fn bundled_digits_load() {
        let digits = GrayscaleDigits::bundled().unwrap();
        assert_eq!(digits.len(), 10_000);
        assert_eq!((digits.height, digits.width), (28, 28));
        assert!(digits.labels.iter().all(|&l| l < 10));
    }

    #[test]
    fn default_palette_is_valid_and_separated() {
        let p = Palette::default();
        p.validate().unwrap();
        assert!(p.min_pairwise_distance() > 0.42);
    }

    #[test]
    fn palette_size_is_enforced() {
        let mut p = Palette::default();
        p.0.pop();
        let err = synthesize_colored_mnist(&synthetic_source(4), &p, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let mut dup = Palette::default();
        dup.0[1] = dup.0[0];
        assert!(dup.validate().is_err());
    }

    #[test]
    fn empty_source_is_an_input_error() {
        let err =
            synthesize_colored_mnist(&synthetic_source(0), &Palette::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn colorization_is_deterministic_and_labelled() {
        let src = synthetic_source(200);
        let a = synthesize_colored_mnist(&src, &Palette::default(), 11).unwrap();
        let b = synthesize_colored_mnist(&src, &Palette::default(), 11).unwrap();
        assert_eq!(a, b);
        assert!(a.images().iter().all(|im| im.private_label < 10));
        assert!(a
            .images()
            .iter()
            .zip(&src.labels)
            .all(|(im, &d)| im.public_label == d));
    }

    #[test]
    fn colorization_preserves_digit_geometry() {
        let src = synthetic_source(50);
        let palette = Palette::default();
        let set = synthesize_colored_mnist(&src, &palette, 5).unwrap();
        for (im, gray) in set.images().iter().zip(&src.images) {
            let color = palette.0[im.private_label as usize];
            for (p, &g) in gray.iter().enumerate() {
                for c in 0..3 {
                    let recovered = im.pixels[p * 3 + c] / color[c];
                    assert!((recovered - g).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn colour_marginal_is_uniform_on_60k() {
        let src = synthetic_source(60_000);
        let set = synthesize_colored_mnist(&src, &Palette::default(), 2024).unwrap();
        let mut counts = [0usize; 10];
        for im in set.images() {
            counts[im.private_label as usize] += 1;
        }
        for c in counts {
            let freq = c as f64 / 60_000.0;
            assert!((freq - 0.1).abs() <= 0.01, "frequency {freq}");
        }
    }

    #[test]
    fn idx_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2];
        images.extend([0u8, 255, 128, 64]);
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        std::fs::write(&ip, &images).unwrap();
        std::fs::write(&lp, &labels).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.labels, vec![7, 3]);
        assert_eq!(d.images[0], vec![0.0, 1.0]);
        std::fs::write(&lp, &labels[..9]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
    }
}
