//! Snaps prototypes onto their nearest same-class latent training patches,
//! with at most one prototype per source image within a class.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ops::l2_distance;
use crate::model::{FeatureMap, PatchSource, Prototype};

/// A projection candidate image.
#[derive(Debug, Clone, Copy)]
pub struct LatentSample<'a> {
    pub image_id: &'a str,
    pub label: usize,
    pub features: &'a FeatureMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionEntry {
    pub prototype: usize,
    pub class_id: usize,
    pub source: PatchSource,
    pub distance_moved: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub entries: Vec<ProjectionEntry>,
    pub diversity_ok: bool,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    distance: f64,
    image: usize,
    row: usize,
    col: usize,
}

/// Orders by distance, then by (image id, row, col).
fn cmp_candidates(a: &Candidate, b: &Candidate, ids: &[&str]) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then_with(|| ids[a.image].cmp(ids[b.image]))
        .then(a.row.cmp(&b.row))
        .then(a.col.cmp(&b.col))
}

/// Greedy nearest-first projection.
///
/// Within each class, repeatedly picks the unassigned prototype whose best
/// patch among unclaimed images is nearest, snaps it there and claims that image.
pub fn project_prototypes(
    prototypes: &mut [Prototype],
    samples: &[LatentSample<'_>],
) -> Result<ProjectionResult> {
    let mut seen = BTreeSet::new();
    for s in samples {
        if !seen.insert(s.image_id) {
            return Err(Error::Validation(vec![format!(
                "duplicate image id `{}` in projection set",
                s.image_id
            )]));
        }
    }
    let ids: Vec<&str> = samples.iter().map(|s| s.image_id).collect();

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, p) in prototypes.iter().enumerate() {
        by_class.entry(p.class_id).or_default().push(j);
    }

    let mut short = Vec::new();
    for (&class, protos) in &by_class {
        let n_images = samples.iter().filter(|s| s.label == class).count();
        if n_images < protos.len() {
            short.push(format!(
                "class {class}: {n_images} distinct images for {} prototypes",
                protos.len()
            ));
        }
    }
    if !short.is_empty() {
        return Err(Error::Validation(short));
    }

    let mut entries = Vec::with_capacity(prototypes.len());
    let mut diversity_ok = true;
    for (&class, protos) in &by_class {
        let images: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == class).collect();
        // best[p][k]: nearest patch of images[k] to prototype protos[p]
        let mut best: Vec<Vec<Candidate>> = Vec::with_capacity(protos.len());
        for &j in protos {
            let v = &prototypes[j].vector;
            let mut row = Vec::with_capacity(images.len());
            for &i in &images {
                let z = samples[i].features;
                if z.depth() != v.len() {
                    return Err(Error::Shape(format!(
                        "prototype {j} has length {} but features of `{}` have depth {}",
                        v.len(),
                        ids[i],
                        z.depth()
                    )));
                }
                let mut top: Option<Candidate> = None;
                for r in 0..z.rows() {
                    for c in 0..z.cols() {
                        let d = l2_distance(z.patch(r, c), v);
                        if d.is_nan() {
                            return Err(Error::Numeric(format!(
                                "NaN distance between prototype {j} and `{}` ({r},{c})",
                                ids[i]
                            )));
                        }
                        let cand = Candidate { distance: d, image: i, row: r, col: c };
                        if top.is_none_or(|t| cmp_candidates(&cand, &t, &ids).is_lt()) {
                            top = Some(cand);
                        }
                    }
                }
                row.push(top.expect("feature map has at least one cell"));
            }
            best.push(row);
        }

        let mut claimed = vec![false; images.len()];
        let mut pending: Vec<usize> = (0..protos.len()).collect();
        while !pending.is_empty() {
            let mut pick: Option<(usize, usize, Candidate)> = None;
            for (slot, &p) in pending.iter().enumerate() {
                let avail = best[p]
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| !claimed[*k])
                    .min_by(|a, b| cmp_candidates(a.1, b.1, &ids));
                let Some((k, cand)) = avail else { continue };
                if pick.is_none_or(|(_, _, cur)| cmp_candidates(cand, &cur, &ids).is_lt()) {
                    pick = Some((slot, k, *cand));
                }
            }
            let (slot, k, cand) = pick.expect("enough images were checked above");
            let p = pending.remove(slot);
            claimed[k] = true;
            let j = protos[p];
            let z = samples[cand.image].features;
            prototypes[j].vector = z.patch(cand.row, cand.col).to_vec();
            let source = PatchSource {
                image_id: ids[cand.image].to_string(),
                row: cand.row,
                col: cand.col,
            };
            prototypes[j].source = Some(source.clone());
            entries.push(ProjectionEntry {
                prototype: j,
                class_id: class,
                source,
                distance_moved: cand.distance,
            });
        }
        let distinct: BTreeSet<&str> = entries
            .iter()
            .filter(|e| e.class_id == class)
            .map(|e| e.source.image_id.as_str())
            .collect();
        diversity_ok &= distinct.len() == protos.len();
    }
    entries.sort_by_key(|e| e.prototype);
    Ok(ProjectionResult { entries, diversity_ok })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(values: Vec<f64>, rows: usize, cols: usize, depth: usize) -> FeatureMap {
        FeatureMap::new(rows, cols, depth, values).unwrap()
    }

    fn proto(class_id: usize, vector: Vec<f64>) -> Prototype {
        Prototype { class_id, vector, source: None }
    }

    #[test]
    fn single_prototype_per_class_is_plain_nearest_patch() {
        let a = fm(vec![0.0, 5.0, 2.0, 9.0], 2, 2, 1);
        let b = fm(vec![1.1, 7.0, 3.0, 4.0], 2, 2, 1);
        let samples = [
            LatentSample { image_id: "a", label: 0, features: &a },
            LatentSample { image_id: "b", label: 0, features: &b },
        ];
        let mut protos = vec![proto(0, vec![1.0])];
        let res = project_prototypes(&mut protos, &samples).unwrap();
        assert_eq!(protos[0].vector, vec![1.1]);
        assert_eq!(res.entries[0].source, PatchSource { image_id: "b".into(), row: 0, col: 0 });
        assert!((res.entries[0].distance_moved - 0.1).abs() < 1e-12);
    }

    #[test]
    fn too_few_images_lists_the_class() {
        let a = fm(vec![0.0], 1, 1, 1);
        let samples = [LatentSample { image_id: "a", label: 1, features: &a }];
        let mut protos = vec![proto(1, vec![0.0]), proto(1, vec![1.0])];
        let err = project_prototypes(&mut protos, &samples).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn nan_features_are_numeric_errors() {
        let a = fm(vec![f64::NAN], 1, 1, 1);
        let samples = [LatentSample { image_id: "a", label: 0, features: &a }];
        let mut protos = vec![proto(0, vec![0.0])];
        assert!(matches!(project_prototypes(&mut protos, &samples), Err(Error::Numeric(_))));
    }

    #[test]
    fn distance_ties_go_to_smaller_image_id_then_position() {
        let a = fm(vec![1.0, 1.0], 1, 2, 1);
        let b = fm(vec![1.0, 1.0], 1, 2, 1);
        let samples = [
            LatentSample { image_id: "b", label: 0, features: &b },
            LatentSample { image_id: "a", label: 0, features: &a },
        ];
        let mut protos = vec![proto(0, vec![0.0])];
        let res = project_prototypes(&mut protos, &samples).unwrap();
        assert_eq!(res.entries[0].source, PatchSource { image_id: "a".into(), row: 0, col: 0 });
    }
}
