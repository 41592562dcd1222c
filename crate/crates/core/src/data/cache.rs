//! On-disk dataset cache.
//!
//! Layout of a cache directory:
//!
//! ```text
//! manifest.json      CacheManifest (JSON object)
//! train.bin          split arrays, see below
//! validation.bin
//! test.bin
//! ```
//!
//! Each `.bin` file is little-endian: the magic `PJIS`, then u32 fields
//! `version, count, height, width, channels, public_categories,
//! private_categories`, then `count` pairs of u32 `(public, private)`
//! labels, then `count × height × width × channels` f32 pixels in
//! height-width-channel order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetName, ImageSet, ImageShape, LabeledImage, Splits};
use crate::error::{Error, Result};

pub const CACHE_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PJIS";
const SPLITS: [&str; 3] = ["train", "validation", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheManifest {
    pub format_version: u32,
    pub dataset: DatasetName,
    pub shape: ImageShape,
    /// Hash of the generation inputs (source, palette, seeds, split).
    pub input_hash: String,
    /// Per-split content hashes.
    pub content_hashes: BTreeMap<String, String>,
    pub counts: BTreeMap<String, usize>,
    pub code_version: String,
}

fn encode_split(set: &ImageSet) -> Vec<u8> {
    let shape = set.shape();
    let mut out = Vec::with_capacity(32 + set.len() * (8 + shape.len() * 4));
    out.extend_from_slice(MAGIC);
    for v in [
        CACHE_FORMAT_VERSION as usize,
        set.len(),
        shape.height,
        shape.width,
        shape.channels,
        set.public_categories(),
        set.private_categories(),
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for im in set.images() {
        out.extend_from_slice(&im.public_label.to_le_bytes());
        out.extend_from_slice(&im.private_label.to_le_bytes());
    }
    for im in set.images() {
        for v in &im.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_split(bytes: &[u8], path: &Path) -> Result<ImageSet> {
    let u32_at = |i: usize| -> Result<usize> {
        bytes
            .get(4 + 4 * i..8 + 4 * i)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| Error::format(path, "truncated header"))
    };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::format(path, "missing PJIS magic"));
    }
    if u32_at(0)? != CACHE_FORMAT_VERSION as usize {
        return Err(Error::format(path, "unsupported cache version"));
    }
    let count = u32_at(1)?;
    let shape = ImageShape {
        height: u32_at(2)?,
        width: u32_at(3)?,
        channels: u32_at(4)?,
    };
    let (public_categories, private_categories) = (u32_at(5)?, u32_at(6)?);
    let labels_at = 32;
    let pixels_at = labels_at + 8 * count;
    if bytes.len() != pixels_at + 4 * count * shape.len() {
        return Err(Error::format(path, "payload length does not match header"));
    }
    let word = |o: usize| [bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]];
    let images = (0..count)
        .map(|i| {
            let base = pixels_at + 4 * i * shape.len();
            LabeledImage {
                public_label: u32::from_le_bytes(word(labels_at + 8 * i)),
                private_label: u32::from_le_bytes(word(labels_at + 8 * i + 4)),
                pixels: (0..shape.len())
                    .map(|p| f32::from_le_bytes(word(base + 4 * p)))
                    .collect(),
            }
        })
        .collect();
    ImageSet::new(shape, public_categories, private_categories, images)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Writes `splits` and a manifest into `dir` (created if needed).
pub fn write_cache(
    dir: &Path,
    dataset: DatasetName,
    splits: &Splits,
    input_hash: &str,
) -> Result<CacheManifest> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut content_hashes = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for (name, set) in SPLITS
        .iter()
        .zip([&splits.train, &splits.validation, &splits.test])
    {
        let path = dir.join(format!("{name}.bin"));
        let mut file = std::fs::File::create(&path).map_err(Error::io(&path))?;
        file.write_all(&encode_split(set)).map_err(Error::io(&path))?;
        content_hashes.insert(name.to_string(), set.content_hash());
        counts.insert(name.to_string(), set.len());
    }
    let manifest = CacheManifest {
        format_version: CACHE_FORMAT_VERSION,
        dataset,
        shape: splits.train.shape(),
        input_hash: input_hash.to_string(),
        content_hashes,
        counts,
        code_version: crate::CODE_VERSION.to_string(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(Error::io(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CacheManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Reads a cache written by [`write_cache`], verifying content hashes.
pub fn read_cache(dir: &Path) -> Result<(CacheManifest, Splits)> {
    let manifest = read_manifest(dir)?;
    if manifest.format_version != CACHE_FORMAT_VERSION {
        return Err(Error::format(
            dir.join("manifest.json"),
            "unsupported cache version",
        ));
    }
    let mut sets = Vec::with_capacity(3);
    for name in SPLITS {
        let path = dir.join(format!("{name}.bin"));
        let bytes = std::fs::read(&path).map_err(Error::io(&path))?;
        let set = decode_split(&bytes, &path)?;
        if manifest.content_hashes.get(name) != Some(&set.content_hash()) {
            return Err(Error::format(&path, "content hash does not match manifest"));
        }
        sets.push(set);
    }
    let test = sets.pop().unwrap();
    let validation = sets.pop().unwrap();
    let train = sets.pop().unwrap();
    Ok((
        manifest,
        Splits {
            train,
            validation,
            test,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(n: usize, offset: f32) -> ImageSet {
        let images = (0..n)
            .map(|i| LabeledImage {
                pixels: (0..12).map(|p| ((p + i) as f32 * 0.01 + offset).min(1.0)).collect(),
                public_label: i as u32 % 10,
                private_label: (i as u32 + 3) % 10,
            })
            .collect();
        ImageSet::new(ImageShape::rgb(2, 2), 10, 10, images).unwrap()
    }

    #[test]
    fn cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let splits = Splits {
            train: set(5, 0.0),
            validation: set(2, 0.1),
            test: set(3, 0.2),
        };
        let written = write_cache(dir.path(), DatasetName::ColoredMnist, &splits, "abc").unwrap();
        let (manifest, back) = read_cache(dir.path()).unwrap();
        assert_eq!(manifest, written);
        assert_eq!(back, splits);
        assert_eq!(manifest.counts["validation"], 2);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let splits = Splits {
            train: set(2, 0.0),
            validation: set(2, 0.1),
            test: set(2, 0.2),
        };
        write_cache(dir.path(), DatasetName::ColoredMnist, &splits, "abc").unwrap();
        let path = dir.path().join("test.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_cache(dir.path()), Err(Error::Format { .. })));
        std::fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(read_cache(dir.path()), Err(Error::Format { .. })));
    }
}
