//! Dataset ingestion (IDX), synthetic digit generation, downscaling,
//! and portable-map image serialization.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub count: usize,
    pub side: usize,
    pub classes: usize,
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> std::result::Result<u32, String> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(format!("truncated file while reading {what}"));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Parse IDX image bytes (magic 0x00000803) into [0,1] images.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<Vec<Image>, String> {
    let magic = read_u32_be(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format!(
            "bad image magic: expected {IDX_IMAGES_MAGIC:#010x}, observed {magic:#010x}"
        ));
    }
    let count = read_u32_be(bytes, 4, "image count")? as usize;
    let rows = read_u32_be(bytes, 8, "row count")? as usize;
    let cols = read_u32_be(bytes, 12, "column count")? as usize;
    let per_image = rows
        .checked_mul(cols)
        .ok_or("image dimensions overflow")?;
    let total = per_image
        .checked_mul(count)
        .ok_or("image payload size overflows")?;
    let payload = &bytes[16.min(bytes.len())..];
    if payload.len() < total {
        return Err(format!(
            "truncated image payload: expected {total} bytes, got {}",
            payload.len()
        ));
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let raw = &payload[i * per_image..(i + 1) * per_image];
        let pixels = raw.iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Image::new(rows, cols, 1, pixels));
    }
    Ok(images)
}

/// Parse IDX label bytes (magic 0x00000801).
pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<usize>, String> {
    let magic = read_u32_be(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format!(
            "bad label magic: expected {IDX_LABELS_MAGIC:#010x}, observed {magic:#010x}"
        ));
    }
    let count = read_u32_be(bytes, 4, "label count")? as usize;
    let payload = &bytes[8.min(bytes.len())..];
    if payload.len() < count {
        return Err(format!(
            "truncated label payload: expected {count} bytes, got {}",
            payload.len()
        ));
    }
    Ok(payload[..count].iter().map(|&b| b as usize).collect())
}

/// Load an IDX image/label pair and cross-check the counts.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let images = parse_idx_images(&image_bytes).map_err(|msg| Error::Format {
        path: images_path.display().to_string(),
        msg,
    })?;
    let labels = parse_idx_labels(&label_bytes).map_err(|msg| Error::Format {
        path: labels_path.display().to_string(),
        msg,
    })?;
    if images.len() != labels.len() {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            msg: format!(
                "count mismatch: {} images vs {} labels",
                images.len(),
                labels.len()
            ),
        });
    }
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(LabeledDataset {
        images,
        labels,
        class_count,
        name: images_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".into()),
    })
}

/// Serialize a dataset back to an IDX pair. Pixels are quantized to u8.
pub fn write_idx(dataset: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let first = dataset
        .images
        .first()
        .ok_or_else(|| Error::config("cannot write an empty dataset"))?;
    let (rows, cols) = (first.height, first.width);
    let mut image_bytes = Vec::with_capacity(16 + dataset.len() * rows * cols);
    image_bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    image_bytes.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in &dataset.images {
        for &p in &img.pixels {
            image_bytes.push((p * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut label_bytes = Vec::with_capacity(8 + dataset.len());
    label_bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    label_bytes.extend(dataset.labels.iter().map(|&l| l as u8));
    std::fs::write(images_path, image_bytes).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, label_bytes).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// Class-conditional synthetic digits: each class lights a distinct row
/// and column band, plus Gaussian noise. Separable by a small MLP.
pub fn synth_digits(n: usize, side: usize, classes: usize, rng: &mut Rng) -> LabeledDataset {
    assert!(n >= classes, "need at least one sample per class");
    assert!(side >= 4, "side too small for class templates");
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let mut img = Image::zeros(side, side, 1);
        // background
        for p in &mut img.pixels {
            *p = 0.1;
        }
        let band = (class * side) / classes;
        let band2 = ((class + classes / 2) % classes * side) / classes;
        for x in 0..side {
            img.set(band, x, 0, 0.95);
            if band + 1 < side {
                img.set(band + 1, x, 0, 0.8);
            }
        }
        for y in 0..side {
            img.set(y, band2, 0, 0.9);
        }
        for p in &mut img.pixels {
            *p += noise.sample(rng);
        }
        img.clamp_in_place();
        images.push(img);
        labels.push(class);
    }
    LabeledDataset {
        images,
        labels,
        class_count: classes,
        name: format!("synth-{side}x{side}-{classes}c"),
    }
}

/// Mean pooling over factor x factor blocks.
pub fn downscale(img: &Image, factor: usize) -> Result<Image> {
    if factor == 0 || img.height % factor != 0 || img.width % factor != 0 {
        return Err(Error::config(format!(
            "extents {}x{} not divisible by factor {factor}",
            img.height, img.width
        )));
    }
    let (h, w) = (img.height / factor, img.width / factor);
    let mut out = Image::zeros(h, w, img.channels);
    let norm = 1.0 / (factor * factor) as f64;
    for y in 0..h {
        for x in 0..w {
            for c in 0..img.channels {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += img.get(y * factor + dy, x * factor + dx, c);
                    }
                }
                out.set(y, x, c, acc * norm);
            }
        }
    }
    Ok(out)
}

/// Write a P5 (grayscale) or P6 (3-channel) portable map, maxval 255.
pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        other => {
            return Err(Error::config(format!(
                "portable maps support 1 or 3 channels, got {other}"
            )))
        }
    };
    let mut bytes = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend(
        img.pixels
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parse P5/P6 bytes back into an image.
pub fn parse_pnm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0usize;
    let mut token = || -> std::result::Result<String, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        String::from_utf8(bytes[start..pos].to_vec()).map_err(|_| "non-ascii header".into())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported magic '{other}'")),
    };
    let width: usize = token()?.parse().map_err(|e| format!("bad width: {e}"))?;
    let height: usize = token()?.parse().map_err(|e| format!("bad height: {e}"))?;
    let maxval: usize = token()?.parse().map_err(|e| format!("bad maxval: {e}"))?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if width == 0 || height == 0 || width.saturating_mul(height) > 1 << 24 {
        return Err("unreasonable dimensions".into());
    }
    let pos = pos + 1; // single whitespace after maxval
    let need = width * height * channels;
    if bytes.len() < pos + need {
        return Err(format!(
            "truncated payload: expected {need} bytes, got {}",
            bytes.len().saturating_sub(pos)
        ));
    }
    let pixels = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok(Image::new(height, width, channels, pixels))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes).map_err(|msg| Error::Format {
        path: path.display().to_string(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn tiny_dataset() -> LabeledDataset {
        LabeledDataset {
            images: vec![
                Image::new(2, 2, 1, vec![0.0, 1.0, 0.5, 0.25]),
                Image::new(2, 2, 1, vec![1.0, 0.0, 0.75, 0.1]),
            ],
            labels: vec![3, 1],
            class_count: 4,
            name: "tiny".into(),
        }
    }

    #[test]
    fn idx_round_trip_is_lossless_at_u8() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images.idx");
        let lbl_path = dir.path().join("labels.idx");
        let ds = tiny_dataset();
        write_idx(&ds, &img_path, &lbl_path).unwrap();
        let loaded = load_idx(&img_path, &lbl_path).unwrap();
        assert_eq!(loaded.labels, ds.labels);
        for (a, b) in loaded.images.iter().zip(&ds.images) {
            for (&x, &y) in a.pixels.iter().zip(&b.pixels) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        // scaling endpoints survive exactly
        assert_eq!(loaded.images[0].pixels[0], 0.0);
        assert_eq!(loaded.images[0].pixels[1], 1.0);
    }

    #[test]
    fn truncated_idx_is_an_explicit_error() {
        let err = parse_idx_images(&[0, 0, 8, 3, 0, 0, 0, 2]).unwrap_err();
        assert!(err.contains("truncated"));
        let err = parse_idx_labels(&[0, 0, 8]).unwrap_err();
        assert!(err.contains("truncated"));
    }

    #[test]
    fn wrong_magic_reports_observed_bytes() {
        let err = parse_idx_images(&[0xde, 0xad, 0xbe, 0xef, 0, 0, 0, 0]).unwrap_err();
        assert!(err.contains("0xdeadbeef"));
    }

    #[test]
    fn count_mismatch_is_a_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images.idx");
        let lbl_path = dir.path().join("labels.idx");
        let ds = tiny_dataset();
        write_idx(&ds, &img_path, &lbl_path).unwrap();
        // rewrite labels with a different count
        let mut label_bytes = Vec::new();
        label_bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        label_bytes.extend_from_slice(&3u32.to_be_bytes());
        label_bytes.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&lbl_path, label_bytes).unwrap();
        assert!(load_idx(&img_path, &lbl_path).is_err());
    }

    #[test]
    fn synth_digits_counts_and_determinism() {
        let a = synth_digits(10, 8, 10, &mut seeded(4));
        let b = synth_digits(10, 8, 10, &mut seeded(4));
        for c in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 1);
        }
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.pixels, y.pixels);
        }
        assert!(a
            .images
            .iter()
            .all(|i| i.pixels.iter().all(|&p| (0.0..=1.0).contains(&p))));
    }

    #[test]
    fn downscale_means_blocks() {
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]);
        let out = downscale(&img, 2).unwrap();
        assert_eq!(out.pixels, vec![0.5]);
        let id = downscale(&img, 1).unwrap();
        assert_eq!(id.pixels, img.pixels);
        assert!(downscale(&img, 3).is_err());
    }

    #[test]
    fn pnm_round_trip_and_magic_selection() {
        let dir = tempfile::tempdir().unwrap();
        let gray = Image::new(2, 2, 1, vec![0.0, 0.0, 0.0, 0.0]);
        let path = dir.path().join("a.pgm");
        write_image(&gray, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 0, 0, 0]);

        let rgb = Image::new(1, 2, 3, vec![0.1, 0.5, 0.9, 0.2, 0.4, 0.6]);
        let path = dir.path().join("b.ppm");
        write_image(&rgb, &path).unwrap();
        let loaded = read_image(&path).unwrap();
        assert_eq!(loaded.channels, 3);
        for (a, b) in rgb.pixels.iter().zip(&loaded.pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
