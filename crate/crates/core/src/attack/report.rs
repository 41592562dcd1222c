//! Artifact writers: the metrics table, the accuracy-vs-SNR plot and the
//! original/reconstruction image grid. Every artifact carries the
//! configuration hash and code version.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use candle_core::{DType, Tensor};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub snr_ae_db: f64,
    pub accuracy: f64,
    pub n_test: usize,
    pub config_hash: String,
    pub code_version: String,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

fn plot_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, format!("plotting failed: {e}"))
}

/// Static SVG line chart of eavesdropping accuracy against the
/// eavesdropper's SNR, one curve per model. `provenance` entries are
/// embedded in the file's `<metadata>` element.
pub fn write_accuracy_plot(
    path: &Path,
    curves: &[(String, Vec<(f64, f64)>)],
    chance: Option<f64>,
    provenance: &BTreeMap<String, String>,
) -> Result<()> {
    let xs: Vec<f64> = curves.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
    if xs.is_empty() {
        return Err(Error::Input("nothing to plot".into()));
    }
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) };
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 440)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_error(path, e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption("Eavesdropping accuracy vs eavesdropper SNR", ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(55)
            .build_cartesian_2d(lo..hi, 0f64..1f64)
            .map_err(|e| plot_error(path, e))?;
        chart
            .configure_mesh()
            .x_desc("SNR_AE (dB)")
            .y_desc("accuracy on private label")
            .draw()
            .map_err(|e| plot_error(path, e))?;
        if let Some(c) = chance {
            chart
                .draw_series(LineSeries::new([(lo, c), (hi, c)], BLACK.mix(0.3)))
                .map_err(|e| plot_error(path, e))?;
        }
        for (i, (name, points)) in curves.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
                .map_err(|e| plot_error(path, e))?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color.stroke_width(2)));
            chart
                .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(|e| plot_error(path, e))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_error(path, e))?;
        root.present().map_err(|e| plot_error(path, e))?;
    }
    let meta: String = provenance
        .iter()
        .map(|(k, v)| format!("{k}={v};"))
        .collect();
    let svg = match svg.find('>') {
        Some(end) => format!("{}<metadata>{meta}</metadata>{}", &svg[..=end], &svg[end + 1..]),
        None => svg,
    };
    std::fs::write(path, svg).map_err(Error::io(path))
}

/// Lossless PNG with the first `columns` originals on the top row and
/// their reconstructions below. Both tensors are `(N, 3, H, W)` in [0, 1].
pub fn write_image_grid(
    path: &Path,
    originals: &Tensor,
    reconstructions: &Tensor,
    columns: usize,
    provenance: &BTreeMap<String, String>,
) -> Result<()> {
    if originals.dims() != reconstructions.dims() || originals.rank() != 4 || originals.dim(1)? != 3 {
        return Err(Error::Input(format!(
            "image grid needs matching (N, 3, H, W) tensors, got {:?} and {:?}",
            originals.dims(),
            reconstructions.dims()
        )));
    }
    let (n, _, h, w) = originals.dims4()?;
    let cols = columns.min(n).max(1);
    let pad = 2;
    let width = cols * (w + pad) + pad;
    let height = 2 * (h + pad) + pad;
    let mut pixels = vec![255u8; width * height * 3];
    for (row, images) in [originals, reconstructions].into_iter().enumerate() {
        let values: Vec<f32> = images
            .narrow(0, 0, cols)?
            .flatten_all()?
            .to_dtype(DType::F32)?
            .to_vec1()?;
        for c in 0..cols {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        let v = values[((c * 3 + ch) * h + y) * w + x];
                        let px = pad + c * (w + pad) + x;
                        let py = pad + row * (h + pad) + y;
                        pixels[(py * width + px) * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    let file = File::create(path).map_err(Error::io(path))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    for (k, v) in provenance {
        encoder
            .add_text_chunk(k.clone(), v.clone())
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(&pixels)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn provenance() -> BTreeMap<String, String> {
        BTreeMap::from([
            ("config_hash".to_string(), "abc123".to_string()),
            ("code_version".to_string(), crate::CODE_VERSION.to_string()),
        ])
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            MetricsRow {
                model: "dib".into(),
                snr_ae_db: -5.0,
                accuracy: 0.1,
                n_test: 20,
                config_hash: "h".into(),
                code_version: "v".into(),
            },
            MetricsRow {
                model: "adv@-5dB".into(),
                snr_ae_db: 15.0,
                accuracy: 0.4,
                n_test: 20,
                config_hash: "h".into(),
                code_version: "v".into(),
            },
        ];
        write_metrics_csv(&path, &rows).unwrap();
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("model,snr_ae_db,accuracy,n_test,config_hash,code_version"));
    }

    #[test]
    fn plot_has_one_labelled_curve_per_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.svg");
        let curves = vec![
            ("dib".to_string(), vec![(-5.0, 0.1), (15.0, 0.11)]),
            ("adv@-5dB".to_string(), vec![(-5.0, 0.2), (15.0, 0.6)]),
        ];
        write_accuracy_plot(&path, &curves, Some(0.1), &provenance()).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.contains("config_hash=abc123"));
        for (name, _) in &curves {
            assert_eq!(svg.matches(&format!("\n{name}\n</text>")).count(), 1, "{name}");
        }
    }

    #[test]
    fn grid_is_lossless_png_with_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let x = Tensor::full(1.0f32, (3, 3, 4, 4), &Device::Cpu).unwrap();
        let y = Tensor::zeros((3, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        write_image_grid(&path, &x, &y, 2, &provenance()).unwrap();
        let decoder = png::Decoder::new(File::open(&path).unwrap());
        let mut reader = decoder.read_info().unwrap();
        let info = reader.info();
        assert_eq!((info.width, info.height), (2 * 6 + 2, 2 * 6 + 2));
        assert!(info
            .uncompressed_latin1_text
            .iter()
            .any(|t| t.keyword == "config_hash" && t.text == "abc123"));
        let mut buf = vec![0; reader.output_buffer_size()];
        reader.next_frame(&mut buf).unwrap();
        // top-left image pixel is white (original), bottom row black
        let width = 14;
        assert_eq!(buf[(2 * width + 2) * 3], 255);
        assert_eq!(buf[(8 * width + 2) * 3], 0);
        assert!(write_image_grid(&path, &x, &y.narrow(0, 0, 2).unwrap(), 2, &provenance()).is_err());
    }
}
