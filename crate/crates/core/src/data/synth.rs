//! Desk-scale stand-in for dermoscopy data.
//!
//! Each image shows an elliptical "lesion" on a skin-coloured background. The
//! lesion's mean interior intensity carries the class (MEL dark, NV lighter).
//! A fraction of MEL images also get a near-black quarter disc in one corner,
//! a class-correlated confound that lies entirely outside the lesion mask.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, ManifestRow, Split, MEL, NV};
use super::mask::{save_mask, LesionMask, MaskPolarity, MaskProvenance};
use super::{save_image, Sample};
use crate::error::{Error, Result};
use crate::model::InputImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub seed: u64,
    pub side: usize,
    /// Share of MEL images (per split) carrying the dark-corner confound.
    pub confound_fraction: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub mask_polarity: MaskPolarity,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 50,
            seed: 0,
            side: 224,
            confound_fraction: 0.5,
            train_fraction: 0.6,
            val_fraction: 0.2,
            mask_polarity: MaskPolarity::LesionWhite,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.n_per_class == 0 {
            p.push("n_per_class must be positive".to_string());
        }
        if self.side < 8 {
            p.push(format!("side {} too small", self.side));
        }
        if !(0.0..=1.0).contains(&self.confound_fraction) {
            p.push("confound_fraction must lie in [0, 1]".to_string());
        }
        if self.train_fraction < 0.0 || self.val_fraction < 0.0 || self.train_fraction + self.val_fraction > 1.0 {
            p.push("train_fraction + val_fraction must lie in [0, 1]".to_string());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub confound: bool,
    pub lesion: Ellipse,
}

#[derive(Debug, Clone)]
pub struct SynthImage {
    pub record: SynthRecord,
    pub image: InputImage,
    pub mask: LesionMask,
}

const SKIN: [f64; 3] = [0.82, 0.64, 0.55];
const NV_LESION: [f64; 3] = [0.55, 0.38, 0.27];
const MEL_LESION: [f64; 3] = [0.30, 0.19, 0.13];
const CORNER: [f64; 3] = [0.03, 0.03, 0.03];

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(0x5851_F42D))
}

/// Renders one image. Pixel (y, x) is sampled at its centre.
pub fn render(id: &str, label: usize, confound: bool, side: usize, rng: &mut impl Rng) -> SynthImage {
    let s = side as f64;
    let lesion = Ellipse {
        cy: s / 2.0 + rng.random_range(-0.05..0.05) * s,
        cx: s / 2.0 + rng.random_range(-0.05..0.05) * s,
        ry: rng.random_range(0.21..0.32) * s,
        rx: rng.random_range(0.21..0.32) * s,
        angle: rng.random_range(0.0..std::f64::consts::PI),
    };
    let corner = rng.random_range(0..4usize);
    let corner_r = rng.random_range(0.21..0.27) * s;
    let (corner_y, corner_x) = match corner {
        0 => (0.0, 0.0),
        1 => (0.0, s),
        2 => (s, 0.0),
        _ => (s, s),
    };
    let skin_shift = rng.random_range(-0.04..0.04);
    let lesion_shift = rng.random_range(-0.05..0.05);
    let base = if label == MEL { MEL_LESION } else { NV_LESION };
    let skin_noise = Normal::new(0.0, 0.025).expect("valid std");
    let lesion_noise = Normal::new(0.0, 0.04).expect("valid std");

    let mut pixels = Vec::with_capacity(side * side * 3);
    let mut mask = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let inside = lesion.contains(py, px);
            let in_corner = confound && ((py - corner_y).powi(2) + (px - corner_x).powi(2)).sqrt() <= corner_r;
            let rgb = if inside {
                let n = lesion_noise.sample(rng);
                base.map(|c| c + lesion_shift + n)
            } else if in_corner {
                let n = skin_noise.sample(rng) * 0.4;
                CORNER.map(|c| c + n)
            } else {
                let n = skin_noise.sample(rng);
                SKIN.map(|c| c + skin_shift + n)
            };
            pixels.extend(rgb.map(|v| quantize(v.clamp(0.0, 1.0))));
            mask.push(if inside { 0 } else { 1 });
        }
    }
    let image = InputImage::new(id, side, pixels, Some(label)).expect("rendered pixels are valid");
    let mask = LesionMask::new(side, side, mask, MaskProvenance::Synthetic).expect("binary mask");
    SynthImage {
        record: SynthRecord { id: id.to_string(), label, split: Split::Train, confound, lesion },
        image,
        mask,
    }
}

/// Rounds to the 8-bit grid so in-memory images equal their PNG round trip.
fn quantize(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

/// Generates the full set in memory, ordered NV then MEL, each class split
/// train / val / test in that order.
pub fn generate(config: &SynthConfig) -> Result<Vec<SynthImage>> {
    config.validate()?;
    let n = config.n_per_class;
    let n_train = (n as f64 * config.train_fraction).round() as usize;
    let n_val = ((n as f64 * config.val_fraction).round() as usize).min(n - n_train);
    let split_of = |i: usize| {
        if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    };

    let mut picker = ChaCha8Rng::seed_from_u64(config.seed ^ 0xC0FF_EE00);
    let mut confounded = vec![false; n];
    for (lo, hi) in [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, n)] {
        let mut idx: Vec<usize> = (lo..hi).collect();
        idx.shuffle(&mut picker);
        let k = ((hi - lo) as f64 * config.confound_fraction).round() as usize;
        for &i in idx.iter().take(k) {
            confounded[i] = true;
        }
    }

    let mut out = Vec::with_capacity(2 * n);
    for (ci, label) in [NV, MEL].into_iter().enumerate() {
        for i in 0..n {
            let index = ci * n + i;
            let id = format!("syn{:05}", index);
            let confound = label == MEL && confounded[i];
            let mut rng = image_rng(config.seed, index);
            let mut img = render(&id, label, confound, config.side, &mut rng);
            img.record.split = split_of(i);
            out.push(img);
        }
    }
    Ok(out)
}

pub fn to_samples(images: &[SynthImage]) -> Vec<Sample> {
    images
        .iter()
        .map(|s| Sample {
            image: s.image.clone(),
            label: s.record.label,
            mask: Some(s.mask.clone()),
            split: s.record.split,
            path: PathBuf::from(format!("{}.png", s.record.id)),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub records: Vec<SynthRecord>,
}

/// Writes `images/`, `masks/`, `manifest.csv` and `synth.json` under `out`.
pub fn write_synthetic(config: &SynthConfig, out: &Path) -> Result<SynthOutput> {
    let images = generate(config)?;
    let img_dir = out.join("images");
    let mask_dir = out.join("masks");
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rows = Vec::with_capacity(images.len());
    for s in &images {
        let ip = img_dir.join(format!("{}.png", s.record.id));
        let mp = mask_dir.join(format!("{}_mask.png", s.record.id));
        save_image(&s.image, &ip)?;
        save_mask(&s.mask, &mp, config.mask_polarity)?;
        rows.push(ManifestRow {
            id: s.record.id.clone(),
            image: ip,
            label: s.record.label,
            mask: Some(mp),
            split: s.record.split,
        });
    }
    let manifest = out.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    let records: Vec<SynthRecord> = images.into_iter().map(|s| s.record).collect();
    let meta = serde_json::json!({ "config": config, "images": records });
    let meta_path = out.join("synth.json");
    std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    Ok(SynthOutput { manifest, rows, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(confound_fraction: f64, seed: u64) -> SynthConfig {
        SynthConfig { n_per_class: 10, seed, side: 64, confound_fraction, ..SynthConfig::default() }
    }

    fn corner_is_dark(img: &InputImage) -> bool {
        let s = img.side;
        [(0, 0), (0, s - 1), (s - 1, 0), (s - 1, s - 1)]
            .iter()
            .any(|&(y, x)| img.pixel(y, x).iter().all(|&v| v < 0.15))
    }

    #[test]
    fn no_confound_when_fraction_zero() {
        for s in generate(&small(0.0, 1)).unwrap() {
            assert!(!s.record.confound);
            assert!(!corner_is_dark(&s.image), "{}", s.record.id);
        }
    }

    #[test]
    fn confound_only_on_mel_and_visible() {
        let imgs = generate(&small(1.0, 2)).unwrap();
        for s in &imgs {
            assert_eq!(s.record.confound, s.record.label == MEL);
            assert_eq!(corner_is_dark(&s.image), s.record.confound, "{}", s.record.id);
        }
    }

    #[test]
    fn same_seed_same_pixels() {
        let a = generate(&small(0.5, 9)).unwrap();
        let b = generate(&small(0.5, 9)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.pixels, y.image.pixels);
            assert_eq!(x.mask, y.mask);
        }
    }

    #[test]
    fn mask_matches_ellipse_exactly() {
        for s in generate(&small(0.5, 3)).unwrap().iter().take(4) {
            let side = s.image.side;
            let mut inter = 0;
            let mut union = 0;
            for y in 0..side {
                for x in 0..side {
                    let a = s.record.lesion.contains(y as f64 + 0.5, x as f64 + 0.5);
                    let b = s.mask.get(y, x) == 0;
                    inter += (a && b) as usize;
                    union += (a || b) as usize;
                }
            }
            assert_eq!(inter, union);
        }
    }

    #[test]
    fn confound_never_touches_lesion() {
        for s in generate(&SynthConfig { n_per_class: 20, confound_fraction: 1.0, ..SynthConfig::default() })
            .unwrap()
            .iter()
            .filter(|s| s.record.confound)
        {
            for y in 0..s.image.side {
                for x in 0..s.image.side {
                    if s.mask.get(y, x) == 0 {
                        assert!(s.image.pixel(y, x).iter().any(|&v| v > 0.1));
                    }
                }
            }
        }
    }

    #[test]
    fn splits_follow_fractions() {
        let imgs = generate(&SynthConfig { n_per_class: 10, side: 32, ..SynthConfig::default() }).unwrap();
        let count = |sp| imgs.iter().filter(|s| s.record.split == sp).count();
        assert_eq!(count(Split::Train), 12);
        assert_eq!(count(Split::Val), 4);
        assert_eq!(count(Split::Test), 4);
    }
}
