//! Manifests, image and mask loading, the synthetic generator and the
//! valid-prototype store.

pub mod manifest;
pub mod mask;
pub mod synth;
pub mod valid_set;

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::InputImage;

pub use manifest::{load_manifest, write_manifest, Manifest, ManifestRow, Split, MEL, NV};
pub use mask::{load_mask, LesionMask, MaskPolarity, MaskProvenance};
pub use valid_set::{ValidEntry, ValidPrototypeSet};

/// Loads an 8-bit image as unit-interval RGB, resizing to `side` when needed.
pub fn load_image(path: &Path, id: &str, side: usize, label: Option<usize>) -> Result<InputImage> {
    let mut img = image::open(path).map_err(|e| Error::image(path, e))?.into_rgb8();
    if img.width() as usize != side || img.height() as usize != side {
        img = image::imageops::resize(&img, side as u32, side as u32, image::imageops::FilterType::Triangle);
    }
    let pixels = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    InputImage::new(id, side, pixels, label)
}

pub fn to_rgb8(image: &InputImage) -> image::RgbImage {
    let buf = image
        .pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::RgbImage::from_raw(image.side as u32, image.side as u32, buf).expect("buffer matches dimensions")
}

pub fn save_image(image: &InputImage, path: &Path) -> Result<()> {
    to_rgb8(image).save(path).map_err(|e| Error::image(path, e))
}

/// An image with its label and optional lesion mask, ready for training.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: InputImage,
    pub label: usize,
    pub mask: Option<LesionMask>,
    pub split: Split,
    pub path: std::path::PathBuf,
}

impl Sample {
    pub fn id(&self) -> &str {
        &self.image.id
    }
}

/// Loads every manifest row (optionally restricted to some splits).
pub fn load_samples(
    manifest: &Manifest,
    side: usize,
    polarity: MaskPolarity,
    splits: Option<&[Split]>,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for row in &manifest.rows {
        if splits.is_some_and(|s| !s.contains(&row.split)) {
            continue;
        }
        let image = load_image(&row.image, &row.id, side, Some(row.label))?;
        let mask = match &row.mask {
            Some(p) => Some(load_mask(p, side, side, polarity)?.mask),
            None => None,
        };
        out.push(Sample {
            image,
            label: row.label,
            mask,
            split: row.split,
            path: row.image.clone(),
        });
    }
    Ok(out)
}

/// Per-channel mean and standard deviation over a set of images.
pub fn channel_stats<'a>(images: impl IntoIterator<Item = &'a InputImage>) -> ([f64; 3], [f64; 3]) {
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut n = 0usize;
    for img in images {
        for px in img.pixels.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c];
                sq[c] += px[c] * px[c];
            }
            n += 1;
        }
    }
    if n == 0 {
        return ([0.0; 3], [1.0; 3]);
    }
    let mut mean = [0.0; 3];
    let mut std = [1.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] / n as f64;
        let var = (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0);
        std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
    }
    (mean, std)
}
