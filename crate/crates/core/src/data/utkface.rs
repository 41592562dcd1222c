use std::path::Path;

use image::imageops::FilterType;

use super::{ImageSet, ImageShape, LabeledImage};
use crate::error::{Error, Result};

/// Result of [`load_utkface`]: the parsed images plus how many files were
/// skipped because their annotation or pixels could not be read.
#[derive(Debug, Clone)]
pub struct UtkFaceLoad {
    pub images: ImageSet,
    pub skipped: usize,
}

/// Parses `<age>_<gender>_<race>_<timestamp>...` into (gender, race).
fn parse_annotation(file_name: &str) -> Option<(u32, u32)> {
    let mut parts = file_name.split('_');
    let _age: u32 = parts.next()?.parse().ok()?;
    let gender: u32 = parts.next()?.parse().ok()?;
    let race: u32 = parts.next()?.parse().ok()?;
    // the timestamp part must exist; files missing a field shift everything left
    parts.next()?;
    (gender < 2 && race < 5).then_some((gender, race))
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png"))
        .unwrap_or(false)
}

/// Loads UTK Face crops from `directory`.
///
/// The private label is the ethnicity field of the file name (0..5) and
/// the public label is the gender field. Files are visited in sorted name
/// order and resized to `shape` with values scaled to `[0, 1]`.
pub fn load_utkface(directory: &Path, shape: ImageShape) -> Result<UtkFaceLoad> {
    if shape.channels != 3 {
        return Err(Error::Config("UTK Face images are loaded as RGB".into()));
    }
    let mut files: Vec<_> = std::fs::read_dir(directory)
        .map_err(Error::io(directory))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Input(format!(
            "no image files in {}",
            directory.display()
        )));
    }

    let mut images = Vec::with_capacity(files.len());
    let mut skipped = 0;
    for path in &files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let Some((gender, race)) = parse_annotation(name) else {
            log::warn!("skipping {}: unparseable annotation", path.display());
            skipped += 1;
            continue;
        };
        let decoded = match image::open(path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        let rgb = decoded
            .resize_exact(shape.width as u32, shape.height as u32, FilterType::Triangle)
            .to_rgb8();
        images.push(LabeledImage {
            pixels: rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
            public_label: gender,
            private_label: race,
        });
    }
    if images.is_empty() {
        return Err(Error::Input(format!(
            "no usable UTK Face images in {}",
            directory.display()
        )));
    }
    Ok(UtkFaceLoad {
        images: ImageSet::new(shape, 2, 5, images)?,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn write_face(dir: &Path, name: &str, shade: u8) {
        let img = RgbImage::from_pixel(10, 12, Rgb([shade, shade / 2, 255 - shade]));
        img.save(dir.join(name)).unwrap();
    }

    #[test]
    fn annotations_parse() {
        assert_eq!(parse_annotation("25_1_3_20170116.jpg.chip.jpg"), Some((1, 3)));
        assert_eq!(parse_annotation("39_1_20170116174525125.jpg.chip.jpg"), None);
        assert_eq!(parse_annotation("25_0_7_2017.jpg"), None);
    }

    #[test]
    fn loads_sorted_and_skips_bad_names() {
        let dir = tempfile::tempdir().unwrap();
        write_face(dir.path(), "30_0_3_201701.png", 10);
        write_face(dir.path(), "22_1_0_201702.png", 200);
        write_face(dir.path(), "oops.png", 50);
        std::fs::write(dir.path().join("41_0_2_2017.jpg"), b"not a jpeg").unwrap();
        std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();

        let shape = ImageShape::rgb(8, 8);
        let load = load_utkface(dir.path(), shape).unwrap();
        assert_eq!(load.skipped, 2);
        let labels: Vec<_> = load
            .images
            .images()
            .iter()
            .map(|im| (im.public_label, im.private_label))
            .collect();
        assert_eq!(labels, vec![(1, 0), (0, 3)]);
        assert!(load.images.images().iter().all(|im| im.private_label < 5));
        assert_eq!(load.images.shape(), shape);

        let again = load_utkface(dir.path(), shape).unwrap();
        assert_eq!(again.images, load.images);
    }

    #[test]
    fn empty_directory_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_utkface(dir.path(), ImageShape::rgb(8, 8)).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }
}
