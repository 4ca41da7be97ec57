//! Metrics, per-image explanations and the prototype location audit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::checkpoint::SourceRow;
use crate::data::manifest::class_name;
use crate::data::{to_rgb8, LesionMask, Sample};
use crate::error::{Error, Result};
use crate::model::{activation_to_pam, InputImage, ProtoPartModel};
use crate::render;

/// Default boundary tolerance (input pixels) for the audit.
pub const DEFAULT_AUDIT_BAND: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image: String,
    pub label: usize,
    pub predicted: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub dataset: String,
    /// Balanced accuracy in percent.
    pub ba: f64,
    /// Recall per class in percent.
    pub recall: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub n_per_class: Vec<usize>,
    #[serde(default)]
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    /// Metrics from a confusion matrix. Fails when a class has no examples.
    pub fn from_confusion(confusion: Vec<Vec<usize>>, checkpoint: &str, dataset: &str) -> Result<Self> {
        let k = confusion.len();
        if k == 0 || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square and non-empty".into()));
        }
        let n_per_class: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
        let absent: Vec<String> = n_per_class
            .iter()
            .enumerate()
            .filter(|(_, n)| **n == 0)
            .map(|(c, _)| format!("class {} has no examples; balanced accuracy is undefined", class_name(c)))
            .collect();
        if !absent.is_empty() {
            return Err(Error::Validation(absent));
        }
        let recall: Vec<f64> = (0..k)
            .map(|c| 100.0 * confusion[c][c] as f64 / n_per_class[c] as f64)
            .collect();
        let ba = recall.iter().sum::<f64>() / k as f64;
        Ok(Self {
            checkpoint: checkpoint.to_string(),
            dataset: dataset.to_string(),
            ba,
            recall,
            confusion,
            n_per_class,
            predictions: Vec::new(),
        })
    }

    pub fn from_predictions(
        predictions: Vec<Prediction>,
        num_classes: usize,
        checkpoint: &str,
        dataset: &str,
    ) -> Result<Self> {
        let mut confusion = vec![vec![0; num_classes]; num_classes];
        for p in &predictions {
            confusion[p.label][p.predicted] += 1;
        }
        let mut report = Self::from_confusion(confusion, checkpoint, dataset)?;
        report.predictions = predictions;
        Ok(report)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "checkpoint {}  dataset {}", self.checkpoint, self.dataset);
        let _ = writeln!(s, "{:<8}{:>8}{:>10}", "class", "n", "recall");
        for (c, r) in self.recall.iter().enumerate() {
            let _ = writeln!(s, "{:<8}{:>8}{:>10.2}", class_name(c), self.n_per_class[c], r);
        }
        let _ = writeln!(s, "BA {:.2}", self.ba);
        let _ = write!(s, "confusion (rows = true):");
        for row in &self.confusion {
            let _ = write!(s, " {row:?}");
        }
        s
    }
}

pub fn predict(model: &ProtoPartModel, image: &InputImage, label: usize) -> Result<Prediction> {
    let out = model.forward(image)?;
    Ok(Prediction {
        image: image.id.clone(),
        label,
        predicted: out.logits.predicted(),
        scores: out.logits.scores,
    })
}

pub fn evaluate(model: &ProtoPartModel, samples: &[Sample], checkpoint: &str, dataset: &str) -> Result<EvalReport> {
    let predictions = samples
        .iter()
        .map(|s| predict(model, &s.image, s.label))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_predictions(predictions, model.config.num_classes, checkpoint, dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationEntry {
    pub prototype: usize,
    pub class: usize,
    pub score: f64,
    pub weight: f64,
    pub points: f64,
    /// Argmax latent cell of the prototype's activation on the test image.
    pub location: (usize, usize),
    pub overlay_bbox: [usize; 4],
    pub source: Option<SourceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub image: String,
    pub predicted: usize,
    pub logits: Vec<f64>,
    /// Top prototypes by similarity score, descending.
    pub entries: Vec<ExplanationEntry>,
    /// `score * weight` toward the predicted class for every prototype, by index.
    pub points_by_prototype: Vec<f64>,
}

impl Explanation {
    /// Sum of the predicted class's points in prototype order; equals its logit.
    pub fn predicted_points(&self) -> f64 {
        self.points_by_prototype.iter().fold(0.0, |acc, p| acc + p)
    }
}

pub fn explain(
    model: &ProtoPartModel,
    sources: &[SourceRow],
    image: &InputImage,
    top_n: usize,
) -> Result<Explanation> {
    let m = model.prototypes.len();
    if top_n == 0 || top_n > m {
        return Err(Error::Config(format!("top_n={top_n} outside 1..={m}")));
    }
    let out = model.forward(image)?;
    let predicted = out.logits.predicted();
    let sim = &out.logits.similarity;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| sim[b].total_cmp(&sim[a]).then(a.cmp(&b)));
    let entries = order
        .iter()
        .take(top_n)
        .map(|&j| {
            let (r, c) = out.activations[j].argmax();
            let weight = model.head.weight(predicted, j);
            ExplanationEntry {
                prototype: j,
                class: model.prototypes[j].class_id,
                score: sim[j],
                weight,
                points: sim[j] * weight,
                location: (r, c),
                overlay_bbox: model.cell_bbox(r, c),
                source: sources.iter().find(|s| s.prototype == j).cloned(),
            }
        })
        .collect();
    let points_by_prototype = (0..m).map(|j| model.head.weight(predicted, j) * sim[j]).collect();
    Ok(Explanation {
        image: image.id.clone(),
        predicted,
        logits: out.logits.scores,
        entries,
        points_by_prototype,
    })
}

/// Panel rows: test image | activation overlay | prototype patch | points column.
pub fn render_explanation(
    model: &ProtoPartModel,
    image: &InputImage,
    expl: &Explanation,
    source_images: &BTreeMap<String, InputImage>,
) -> Result<RgbImage> {
    let side = image.side as u32;
    let gap = 4;
    let col_w = side;
    let points_w = side;
    let width = 3 * col_w + points_w + 5 * gap;
    let height = expl.entries.len() as u32 * (side + gap) + gap;
    let mut panel = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let z = model.embed(image)?;
    let maps = model.similarity_maps(&z)?;
    let max_abs = expl.entries.iter().map(|e| e.points.abs()).fold(1e-12, f64::max);
    let base = to_rgb8(image);

    for (i, e) in expl.entries.iter().enumerate() {
        let y = gap + i as u32 * (side + gap);
        imageops::replace(&mut panel, &base, gap as i64, y as i64);

        let pam = activation_to_pam(&maps[e.prototype], image.side)?;
        let mut overlay = render::heat_overlay(image, &pam);
        render::draw_rect(&mut overlay, e.overlay_bbox, 2, render::HIGHLIGHT);
        imageops::replace(&mut panel, &overlay, (2 * gap + col_w) as i64, y as i64);

        let patch = match e.source.as_ref().and_then(|s| source_images.get(&s.image_id).map(|img| (s, img))) {
            Some((s, img)) => render::patch_thumbnail(img, s.bbox, side),
            None => RgbImage::from_pixel(side, side, Rgb([128, 128, 128])),
        };
        imageops::replace(&mut panel, &patch, (3 * gap + 2 * col_w) as i64, y as i64);

        let x0 = 4 * gap + 3 * col_w;
        let bar = ((e.points.abs() / max_abs) * (points_w - 8) as f64).round() as u32;
        let color = if e.points >= 0.0 { Rgb([40, 140, 60]) } else { Rgb([190, 40, 40]) };
        for yy in y + side / 2..(y + side / 2 + 12).min(height) {
            for xx in x0..x0 + bar {
                panel.put_pixel(xx, yy, color);
            }
        }
        let text = format!("{:.3}x{:.2}={:.3}", e.score, e.weight, e.points);
        render::draw_text(&mut panel, &text, x0, y + 8, 2, Rgb([0, 0, 0]));
    }
    Ok(panel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditStatus {
    Inside,
    Outside,
    Unauditable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub prototype: usize,
    pub class: usize,
    pub image: Option<String>,
    /// Input-space `(row, col)` of the max-activation cell center on the source image.
    pub location: Option<(usize, usize)>,
    pub status: AuditStatus,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeAudit {
    pub band: usize,
    pub entries: Vec<AuditEntry>,
    /// Inside fraction among auditable prototypes, per class.
    pub per_class_fraction: Vec<Option<f64>>,
    pub fraction: Option<f64>,
}

/// Source image and its mask, as needed by the audit.
pub struct AuditImage<'a> {
    pub image: &'a InputImage,
    pub mask: Option<&'a LesionMask>,
}

/// Flags each prototype as inside the lesion (or within `band` pixels of it)
/// at the center of its max-activation cell on its source image.
pub fn audit_prototypes(
    model: &ProtoPartModel,
    images: &BTreeMap<String, AuditImage<'_>>,
    band: usize,
) -> Result<PrototypeAudit> {
    let k = model.config.num_classes;
    let mut entries = Vec::with_capacity(model.prototypes.len());
    for (j, p) in model.prototypes.iter().enumerate() {
        let unauditable = |image: Option<String>, reason: &str| AuditEntry {
            prototype: j,
            class: p.class_id,
            image,
            location: None,
            status: AuditStatus::Unauditable,
            reason: Some(reason.to_string()),
        };
        let Some(src) = &p.source else {
            entries.push(unauditable(None, "prototype has not been projected"));
            continue;
        };
        let Some(ai) = images.get(&src.image_id) else {
            entries.push(unauditable(Some(src.image_id.clone()), "source image not available"));
            continue;
        };
        let Some(mask) = ai.mask else {
            entries.push(unauditable(Some(src.image_id.clone()), "no mask for source image"));
            continue;
        };
        let z = model.embed(ai.image)?;
        let a = crate::model::similarity_map(&z, &p.vector, j, model.config.epsilon)?;
        let (r, c) = a.argmax();
        let [x, y, w, h] = model.cell_bbox(r, c);
        let (cy, cx) = (y + h / 2, x + w / 2);
        let (my, mx) = (
            cy * mask.rows() / model.config.input_side,
            cx * mask.cols() / model.config.input_side,
        );
        let inside = mask.lesion_within(my, mx, band);
        entries.push(AuditEntry {
            prototype: j,
            class: p.class_id,
            image: Some(src.image_id.clone()),
            location: Some((cy, cx)),
            status: if inside { AuditStatus::Inside } else { AuditStatus::Outside },
            reason: None,
        });
    }
    let frac = |filter: &dyn Fn(&AuditEntry) -> bool| -> Option<f64> {
        let audited: Vec<_> = entries
            .iter()
            .filter(|e| filter(e) && e.status != AuditStatus::Unauditable)
            .collect();
        if audited.is_empty() {
            return None;
        }
        let inside = audited.iter().filter(|e| e.status == AuditStatus::Inside).count();
        Some(inside as f64 / audited.len() as f64)
    };
    let per_class_fraction = (0..k).map(|c| frac(&|e: &AuditEntry| e.class == c)).collect();
    let fraction = frac(&|_| true);
    Ok(PrototypeAudit { band, entries, per_class_fraction, fraction })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_fixture() {
        let r = EvalReport::from_confusion(vec![vec![160, 0], vec![20, 20]], "c", "d").unwrap();
        assert_eq!(r.recall, vec![100.0, 50.0]);
        assert_eq!(r.ba, 75.0);
        assert_eq!(r.n_per_class, vec![160, 40]);
    }

    #[test]
    fn perfect_predictions() {
        let r = EvalReport::from_confusion(vec![vec![3, 0], vec![0, 7]], "c", "d").unwrap();
        assert_eq!((r.ba, r.recall.clone()), (100.0, vec![100.0, 100.0]));
    }

    #[test]
    fn absent_class_is_error() {
        let err = EvalReport::from_confusion(vec![vec![3, 0], vec![0, 0]], "c", "d").unwrap_err();
        assert!(err.to_string().contains("MEL"), "{err}");
    }
}
