use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which pixel value marks the lesion in a mask file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolarity {
    /// Bright pixels are lesion (ISIC ground truth and most segmenters).
    #[default]
    LesionWhite,
    LesionBlack,
}

impl std::str::FromStr for MaskPolarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lesion-white" => Ok(Self::LesionWhite),
            "lesion-black" => Ok(Self::LesionBlack),
            other => Err(Error::Config(format!(
                "unknown mask polarity `{other}` (expected lesion-white or lesion-black)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskProvenance {
    #[default]
    Dataset,
    AutoSegmented,
    Synthetic,
}

/// Binary relevance grid: 0 = lesion (relevant), 1 = everything else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LesionMask {
    rows: usize,
    cols: usize,
    values: Vec<u8>,
    pub provenance: MaskProvenance,
}

impl LesionMask {
    pub fn new(rows: usize, cols: usize, values: Vec<u8>, provenance: MaskProvenance) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mask {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(vec![format!("mask is not binary: found value {v}")]));
        }
        Ok(Self { rows, cols, values, provenance })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.cols + col]
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn has_lesion(&self) -> bool {
        self.values.contains(&0)
    }

    /// True when a lesion pixel lies within Euclidean distance `band` of `(row, col)`.
    pub fn lesion_within(&self, row: usize, col: usize, band: usize) -> bool {
        let r0 = row.saturating_sub(band);
        let c0 = col.saturating_sub(band);
        let r1 = (row + band).min(self.rows - 1);
        let c1 = (col + band).min(self.cols - 1);
        let band2 = (band * band) as i64;
        for r in r0..=r1 {
            for c in c0..=c1 {
                let dr = r as i64 - row as i64;
                let dc = c as i64 - col as i64;
                if dr * dr + dc * dc <= band2 && self.get(r, c) == 0 {
                    return true;
                }
            }
        }
        false
    }
}

#[derive(Debug, Clone)]
pub struct MaskLoad {
    pub mask: LesionMask,
    pub warning: Option<String>,
}

/// Reads a grayscale/binary image, nearest-neighbour resizes it, thresholds at
/// half intensity and normalizes polarity so the lesion is 0.
pub fn load_mask(path: &Path, rows: usize, cols: usize, polarity: MaskPolarity) -> Result<MaskLoad> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Validation(vec![format!("{}: empty mask image", path.display())]));
    }
    let raw: Vec<u16> = img.into_raw();
    let mask = binarize(&raw, h, w, rows, cols, polarity, |v| v as f64 / u16::MAX as f64)?;
    let warning = (!mask.has_lesion()).then(|| format!("{}: mask contains no lesion pixels", path.display()));
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(MaskLoad { mask, warning })
}

/// Nearest-neighbour resize (source index `floor(i * src / dst)`), threshold, polarity.
pub fn binarize<T: Copy>(
    raw: &[T],
    src_rows: usize,
    src_cols: usize,
    rows: usize,
    cols: usize,
    polarity: MaskPolarity,
    intensity: impl Fn(T) -> f64,
) -> Result<LesionMask> {
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let sr = r * src_rows / rows;
        for c in 0..cols {
            let sc = c * src_cols / cols;
            let bright = intensity(raw[sr * src_cols + sc]) >= 0.5;
            let lesion = match polarity {
                MaskPolarity::LesionWhite => bright,
                MaskPolarity::LesionBlack => !bright,
            };
            values.push(if lesion { 0 } else { 1 });
        }
    }
    LesionMask::new(rows, cols, values, MaskProvenance::Dataset)
}

/// Writes a mask as an 8-bit grayscale PNG in the given polarity.
pub fn save_mask(mask: &LesionMask, path: &Path, polarity: MaskPolarity) -> Result<()> {
    let lesion_px = match polarity {
        MaskPolarity::LesionWhite => 255u8,
        MaskPolarity::LesionBlack => 0,
    };
    let buf: Vec<u8> = mask
        .values()
        .iter()
        .map(|&v| if v == 0 { lesion_px } else { 255 - lesion_px })
        .collect();
    let img = image::GrayImage::from_raw(mask.cols as u32, mask.rows as u32, buf)
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| Error::image(path, e))
}
