//! Objective terms and their analytic gradients.
//!
//! Every distance-based term is evaluated on per-image distance tables
//! (`m` prototypes x `H_z*W_z` cells) and contributes a gradient with respect
//! to those distances. A single chain step then turns distance gradients into
//! gradients on the feature maps and prototype vectors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::mask::LesionMask;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::ops::{
    adaptive_bin, bottom_indices, l2_distance, scale_up, similarity, similarity_slope, top_indices,
};
use crate::model::{FeatureMap, Head, ModelConfig, Prototype};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Cluster term.
    pub lambda1: f64,
    /// Separation term.
    pub lambda2: f64,
    /// Mask term.
    pub lambda3: f64,
    /// Remembering term.
    pub lambda4: f64,
    /// Off-class L1 on the head (last-layer stage).
    pub lambda5: f64,
    /// Size of the mink average in the cluster/separation terms; `None` uses the model's top-k.
    pub kappa: Option<usize>,
    /// Lower clamp applied to the separation term.
    pub separation_floor: f64,
    /// Per-class cross-entropy weights; `None` is unweighted.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.8,
            lambda2: 0.08,
            lambda3: 0.001,
            lambda4: 0.02,
            lambda5: 1e-4,
            kappa: None,
            separation_floor: -1e3,
            class_weights: None,
        }
    }
}

impl LossWeights {
    pub fn kappa_for(&self, config: &ModelConfig) -> usize {
        self.kappa.unwrap_or(config.top_k)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be a non-negative finite number, got {v}"));
            }
        }
        let k = self.kappa_for(config);
        if k == 0 || k > config.latent_cells() {
            problems.push(format!("kappa={k} outside 1..={}", config.latent_cells()));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != config.num_classes || w.iter().any(|v| !(*v > 0.0)) {
                problems.push("class_weights must have K positive entries".to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Supervision scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    #[serde(rename = "lp")]
    Lp,
    #[serde(rename = "lp+lm")]
    LpLm,
    #[serde(rename = "lp+lr")]
    LpLr,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Lp => "lp",
            Mode::LpLm => "lp+lm",
            Mode::LpLr => "lp+lr",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lp" => Ok(Mode::Lp),
            "lp+lm" => Ok(Mode::LpLm),
            "lp+lr" => Ok(Mode::LpLr),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected lp, lp+lm, lp+lr)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    CrossEntropy,
    Cluster,
    Separation,
    Mask,
    Remembering,
    L1Offclass,
}

impl Term {
    pub const ALL: [Term; 6] = [
        Term::CrossEntropy,
        Term::Cluster,
        Term::Separation,
        Term::Mask,
        Term::Remembering,
        Term::L1Offclass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::CrossEntropy => "cross_entropy",
            Term::Cluster => "cluster",
            Term::Separation => "separation",
            Term::Mask => "mask",
            Term::Remembering => "remembering",
            Term::L1Offclass => "l1_offclass",
        }
    }
}

/// Active terms with their multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub terms: Vec<(Term, f64)>,
    pub kappa: usize,
    pub separation_floor: f64,
    pub class_weights: Option<Vec<f64>>,
}

impl Objective {
    /// Prototype-learning objective for a supervision mode.
    pub fn for_mode(mode: Mode, w: &LossWeights, config: &ModelConfig) -> Self {
        let mut terms = vec![
            (Term::CrossEntropy, 1.0),
            (Term::Cluster, w.lambda1),
            (Term::Separation, w.lambda2),
        ];
        match mode {
            Mode::Lp => {}
            Mode::LpLm => terms.push((Term::Mask, w.lambda3)),
            Mode::LpLr => terms.push((Term::Remembering, w.lambda4)),
        }
        Self::with_terms(terms, w, config)
    }

    /// Cross-entropy plus off-class sparsity, for head-only optimization.
    pub fn last_layer(w: &LossWeights, config: &ModelConfig) -> Self {
        Self::with_terms(
            vec![(Term::CrossEntropy, 1.0), (Term::L1Offclass, w.lambda5)],
            w,
            config,
        )
    }

    /// A single term with unit weight.
    pub fn single(term: Term, w: &LossWeights, config: &ModelConfig) -> Self {
        Self::with_terms(vec![(term, 1.0)], w, config)
    }

    pub fn with_terms(terms: Vec<(Term, f64)>, w: &LossWeights, config: &ModelConfig) -> Self {
        Self {
            terms,
            kappa: w.kappa_for(config),
            separation_floor: w.separation_floor,
            class_weights: w.class_weights.clone(),
        }
    }

    pub fn weight(&self, term: Term) -> Option<f64> {
        self.terms.iter().find(|(t, _)| *t == term).map(|(_, w)| *w)
    }

    pub fn uses(&self, term: Term) -> bool {
        self.weight(term).is_some()
    }

    /// Whether any active term depends on the feature maps or prototypes.
    pub fn needs_distances(&self) -> bool {
        self.terms.iter().any(|(t, _)| *t != Term::L1Offclass)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn term(&self, term: Term) -> Option<f64> {
        self.terms.get(term.name()).copied()
    }
}

// ----------------------------------------------------------------------------
// Scalar building blocks
// ----------------------------------------------------------------------------

fn check_label(label: usize, k: usize) -> Result<()> {
    if label >= k {
        return Err(Error::Validation(vec![format!("label {label} outside 0..{k}")]));
    }
    Ok(())
}

/// Softmax cross-entropy of one example, via log-sum-exp.
pub fn cross_entropy(scores: &[f64], label: usize) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::Config("cross-entropy needs at least 2 classes".into()));
    }
    check_label(label, scores.len())?;
    Ok(log_sum_exp(scores) - scores[label])
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

/// Sum of |w| over connections from class k to prototypes not of class k.
pub fn l1_offclass(head: &Head, classes: &[usize]) -> f64 {
    let m = head.num_prototypes();
    head.weights()
        .iter()
        .enumerate()
        .filter(|(i, _)| classes[i % m] != i / m)
        .map(|(_, w)| w.abs())
        .sum()
}

/// Valid-patch embedding for the remembering term.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidPatch {
    pub class_id: usize,
    pub vector: Vec<f64>,
}

/// Per-image distances, `m x cells`, row-major by prototype.
#[derive(Debug, Clone)]
pub struct DistanceTable {
    pub cells: usize,
    pub values: Vec<f64>,
}

impl DistanceTable {
    pub fn compute(z: &FeatureMap, prototypes: &[Prototype]) -> Result<Self> {
        let cells = z.cells();
        let mut values = Vec::with_capacity(prototypes.len() * cells);
        for (j, p) in prototypes.iter().enumerate() {
            if p.vector.len() != z.depth() {
                return Err(Error::Shape(format!(
                    "prototype {j} has length {} but feature depth is {}",
                    p.vector.len(),
                    z.depth()
                )));
            }
            values.extend((0..cells).map(|c| l2_distance(z.patch_at(c), &p.vector)));
        }
        Ok(Self { cells, values })
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.cells..(j + 1) * self.cells]
    }
}

/// Mask-weighted bin counts so the PAM norm can be evaluated on the latent grid.
///
/// Each output pixel of the adaptive upscaling averages one rectangle of latent
/// cells; pixels sharing a rectangle are grouped and only mask-1 pixels counted.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    latent_rows: usize,
    latent_cols: usize,
    /// (row range, col range, number of mask-1 pixels).
    groups: Vec<(usize, usize, usize, usize, f64)>,
}

impl MaskPlan {
    pub fn new(mask: &LesionMask, latent_rows: usize, latent_cols: usize) -> Result<Self> {
        if mask.rows() < latent_rows || mask.cols() < latent_cols {
            return Err(Error::Shape("mask smaller than latent grid".into()));
        }
        let row_bins: Vec<_> = (0..mask.rows()).map(|r| adaptive_bin(r, latent_rows, mask.rows())).collect();
        let col_bins: Vec<_> = (0..mask.cols()).map(|c| adaptive_bin(c, latent_cols, mask.cols())).collect();
        let mut counts: BTreeMap<(usize, usize, usize, usize), usize> = BTreeMap::new();
        for (r, &(r0, r1)) in row_bins.iter().enumerate() {
            for (c, &(c0, c1)) in col_bins.iter().enumerate() {
                if mask.get(r, c) == 1 {
                    *counts.entry((r0, r1, c0, c1)).or_default() += 1;
                }
            }
        }
        let groups = counts
            .into_iter()
            .map(|((r0, r1, c0, c1), n)| (r0, r1, c0, c1, n as f64))
            .collect();
        Ok(Self { latent_rows, latent_cols, groups })
    }

    /// `||M ⊙ ScaleUp(a)||_2` and, if requested, its gradient with respect to `a`.
    pub fn masked_norm(&self, a: &[f64], grad: Option<&mut [f64]>, scale: f64) -> f64 {
        let cols = self.latent_cols;
        let mut means = Vec::with_capacity(self.groups.len());
        let mut sq = 0.0;
        for &(r0, r1, c0, c1, n) in &self.groups {
            let mut s = 0.0;
            for y in r0..r1 {
                for x in c0..c1 {
                    s += a[y * cols + x];
                }
            }
            let mean = s / ((r1 - r0) * (c1 - c0)) as f64;
            sq += n * mean * mean;
            means.push(mean);
        }
        let norm = sq.sqrt();
        if let Some(g) = grad {
            if norm > 0.0 {
                for (&(r0, r1, c0, c1, n), mean) in self.groups.iter().zip(&means) {
                    let share = scale * n * mean / (norm * ((r1 - r0) * (c1 - c0)) as f64);
                    for y in r0..r1 {
                        for x in c0..c1 {
                            g[y * cols + x] += share;
                        }
                    }
                }
            }
        }
        norm
    }

    pub fn latent_cells(&self) -> usize {
        self.latent_rows * self.latent_cols
    }
}

// ----------------------------------------------------------------------------
// Public per-term operations (value only)
// ----------------------------------------------------------------------------

fn class_prototypes(classes: &[usize], class: usize) -> Vec<usize> {
    (0..classes.len()).filter(|&j| classes[j] == class).collect()
}

fn min_mink(table: &DistanceTable, protos: &[usize], kappa: usize) -> (f64, usize, Vec<usize>) {
    let mut best = (f64::INFINITY, usize::MAX, Vec::new());
    for &j in protos {
        let idx = bottom_indices(table.row(j), kappa);
        let v = idx.iter().map(|&c| table.row(j)[c]).sum::<f64>() / kappa as f64;
        if v < best.0 {
            best = (v, j, idx);
        }
    }
    best
}

fn check_kappa(kappa: usize, cells: usize) -> Result<()> {
    if kappa == 0 || kappa > cells {
        return Err(Error::Config(format!("kappa={kappa} outside 1..={cells}")));
    }
    Ok(())
}

fn tables(maps: &[FeatureMap], prototypes: &[Prototype]) -> Result<Vec<DistanceTable>> {
    maps.iter().map(|z| DistanceTable::compute(z, prototypes)).collect()
}

/// Batch mean over images of the smallest same-class mink distance.
pub fn cluster_loss(
    maps: &[FeatureMap],
    prototypes: &[Prototype],
    labels: &[usize],
    kappa: usize,
) -> Result<f64> {
    let classes: Vec<usize> = prototypes.iter().map(|p| p.class_id).collect();
    let t = tables(maps, prototypes)?;
    cluster_term(&t, &classes, labels, kappa, None, 0.0)
}

/// Negated batch mean of the smallest wrong-class mink distance.
pub fn separation_loss(
    maps: &[FeatureMap],
    prototypes: &[Prototype],
    labels: &[usize],
    kappa: usize,
) -> Result<f64> {
    let classes: Vec<usize> = prototypes.iter().map(|p| p.class_id).collect();
    let t = tables(maps, prototypes)?;
    separation_term(&t, &classes, labels, kappa, f64::NEG_INFINITY, None, 0.0)
}

/// Mask penalty from explicit PAMs (`pams[i][j]` for image i, prototype j),
/// summed over same-class prototypes and averaged over the batch.
pub fn mask_loss(
    pams: &[Vec<Grid>],
    masks: &[&LesionMask],
    classes: &[usize],
    labels: &[usize],
) -> Result<f64> {
    if pams.len() != masks.len() || pams.len() != labels.len() {
        return Err(Error::Shape("mask_loss: batch lengths differ".into()));
    }
    let mut total = 0.0;
    for ((pam_row, mask), &y) in pams.iter().zip(masks).zip(labels) {
        for j in class_prototypes(classes, y) {
            let pam = &pam_row[j];
            if pam.rows() != mask.rows() || pam.cols() != mask.cols() {
                return Err(Error::Shape("PAM and mask sizes differ".into()));
            }
            let sq: f64 = pam
                .values()
                .iter()
                .zip(mask.values())
                .map(|(p, &m)| if m == 1 { p * p } else { 0.0 })
                .sum();
            total += sq.sqrt();
        }
    }
    Ok(total / labels.len().max(1) as f64)
}

/// Mask penalty starting from feature maps; PAMs are built with [`scale_up`].
pub fn mask_loss_from_features(
    maps: &[FeatureMap],
    prototypes: &[Prototype],
    masks: &[&LesionMask],
    labels: &[usize],
    epsilon: f64,
) -> Result<f64> {
    let classes: Vec<usize> = prototypes.iter().map(|p| p.class_id).collect();
    let mut pams = Vec::with_capacity(maps.len());
    for (z, mask) in maps.iter().zip(masks) {
        let mut row = Vec::with_capacity(prototypes.len());
        for (j, p) in prototypes.iter().enumerate() {
            let a = crate::model::similarity_map(z, &p.vector, j, epsilon)?;
            row.push(scale_up(&a, mask.rows(), mask.cols())?);
        }
        pams.push(row);
    }
    mask_loss(&pams, masks, &classes, labels)
}

pub fn remembering_loss(valid: &[ValidPatch], prototypes: &[Prototype], epsilon: f64) -> Result<f64> {
    let mut g = vec![0.0; prototypes.len() * prototypes.first().map_or(0, |p| p.vector.len())];
    remembering_term(valid, prototypes, epsilon, &mut g, None, 0.0)
}

// ----------------------------------------------------------------------------
// Terms with gradients on distance tables
// ----------------------------------------------------------------------------

/// Accumulates `scale * dL/d(distance)` into `grad` when given.
pub fn cluster_term(
    tables: &[DistanceTable],
    classes: &[usize],
    labels: &[usize],
    kappa: usize,
    mut grad: Option<&mut [Vec<f64>]>,
    scale: f64,
) -> Result<f64> {
    let n = labels.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (i, (t, &y)) in tables.iter().zip(labels).enumerate() {
        check_kappa(kappa, t.cells)?;
        let own = class_prototypes(classes, y);
        if own.is_empty() {
            return Err(Error::Config(format!("class {y} owns no prototypes")));
        }
        let (v, j, idx) = min_mink(t, &own, kappa);
        sum += v;
        if let Some(g) = grad.as_deref_mut() {
            let w = scale / (kappa * n) as f64;
            for c in idx {
                g[i][j * t.cells + c] += w;
            }
        }
    }
    Ok(sum / n as f64)
}

#[allow(clippy::too_many_arguments)]
pub fn separation_term(
    tables: &[DistanceTable],
    classes: &[usize],
    labels: &[usize],
    kappa: usize,
    floor: f64,
    grad: Option<&mut [Vec<f64>]>,
    scale: f64,
) -> Result<f64> {
    let n = labels.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    let mut picks = Vec::with_capacity(n);
    for (t, &y) in tables.iter().zip(labels) {
        check_kappa(kappa, t.cells)?;
        let other: Vec<usize> = (0..classes.len()).filter(|&j| classes[j] != y).collect();
        if other.is_empty() {
            return Err(Error::Config(format!("no prototypes outside class {y}")));
        }
        let (v, j, idx) = min_mink(t, &other, kappa);
        sum += v;
        picks.push((j, idx));
    }
    let value = -sum / n as f64;
    if value < floor {
        return Ok(floor);
    }
    if let Some(g) = grad {
        let w = -scale / (kappa * n) as f64;
        for (i, (j, idx)) in picks.into_iter().enumerate() {
            let cells = tables[i].cells;
            for c in idx {
                g[i][j * cells + c] += w;
            }
        }
    }
    Ok(value)
}

pub fn mask_term(
    tables: &[DistanceTable],
    plans: &[&MaskPlan],
    classes: &[usize],
    labels: &[usize],
    epsilon: f64,
    mut grad: Option<&mut [Vec<f64>]>,
    scale: f64,
) -> Result<f64> {
    let n = labels.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, ((t, plan), &y)) in tables.iter().zip(plans).zip(labels).enumerate() {
        if plan.latent_cells() != t.cells {
            return Err(Error::Shape("mask plan does not match latent grid".into()));
        }
        for j in class_prototypes(classes, y) {
            let d = t.row(j);
            let a: Vec<f64> = d.iter().map(|&x| similarity(x, epsilon)).collect();
            match grad.as_deref_mut() {
                Some(g) => {
                    let mut ga = vec![0.0; t.cells];
                    total += plan.masked_norm(&a, Some(&mut ga), scale / n as f64);
                    let row = &mut g[i][j * t.cells..(j + 1) * t.cells];
                    for c in 0..t.cells {
                        row[c] += ga[c] * similarity_slope(d[c], epsilon);
                    }
                }
                None => total += plan.masked_norm(&a, None, 0.0),
            }
        }
    }
    Ok(total / n as f64)
}

/// Remembering term; accumulates prototype gradients into `grad_protos` (m x D)
/// and valid-embedding gradients into `grad_valid` when given.
pub fn remembering_term(
    valid: &[ValidPatch],
    prototypes: &[Prototype],
    epsilon: f64,
    grad_protos: &mut [f64],
    mut grad_valid: Option<&mut [Vec<f64>]>,
    scale: f64,
) -> Result<f64> {
    if valid.is_empty() {
        return Err(Error::Config("remembering term needs a non-empty valid set".into()));
    }
    let n = valid.len() as f64;
    let depth = prototypes.first().map_or(0, |p| p.vector.len());
    let mut total = 0.0;
    for (vi, v) in valid.iter().enumerate() {
        if v.vector.len() != depth {
            return Err(Error::Shape(format!(
                "valid patch {vi} has length {}, depth is {depth}",
                v.vector.len()
            )));
        }
        let mut any = false;
        for (j, p) in prototypes.iter().enumerate() {
            if p.class_id != v.class_id {
                continue;
            }
            any = true;
            let d = l2_distance(&p.vector, &v.vector);
            total += similarity(d, epsilon);
            if scale != 0.0 && d > 0.0 {
                let coef = -scale / n * similarity_slope(d, epsilon) / d;
                for k in 0..depth {
                    let diff = p.vector[k] - v.vector[k];
                    grad_protos[j * depth + k] += coef * diff;
                    if let Some(gv) = grad_valid.as_deref_mut() {
                        gv[vi][k] -= coef * diff;
                    }
                }
            }
        }
        if !any {
            return Err(Error::Config(format!(
                "valid patch {vi} has class {} with no prototypes",
                v.class_id
            )));
        }
    }
    Ok(-total / n)
}

// ----------------------------------------------------------------------------
// Whole-batch objective
// ----------------------------------------------------------------------------

/// One batch element as seen by the objective.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub id: &'a str,
    pub features: &'a FeatureMap,
    pub label: usize,
    pub mask: Option<&'a MaskPlan>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub report: LossReport,
    /// Per batch item, gradient on the feature map (cells x D).
    pub grad_features: Vec<Vec<f64>>,
    /// Per valid patch, gradient on its embedding.
    pub grad_valid: Vec<Vec<f64>>,
    /// m x D.
    pub grad_prototypes: Vec<f64>,
    /// K x m.
    pub grad_head: Vec<f64>,
    /// Similarity vectors per item (for metrics).
    pub similarity: Vec<Vec<f64>>,
    pub scores: Vec<Vec<f64>>,
}

/// Evaluates the active terms on a batch and, when `with_grad`, their gradients.
pub fn evaluate_objective(
    batch: &[BatchItem<'_>],
    valid: &[ValidPatch],
    prototypes: &[Prototype],
    head: &Head,
    config: &ModelConfig,
    objective: &Objective,
    with_grad: bool,
) -> Result<ObjectiveOutput> {
    let m = prototypes.len();
    let depth = config.depth;
    let n = batch.len();
    let classes: Vec<usize> = prototypes.iter().map(|p| p.class_id).collect();
    let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();
    for &y in &labels {
        check_label(y, config.num_classes)?;
    }
    let eps = config.epsilon;
    let kappa = objective.kappa;

    let tables: Vec<DistanceTable> = if objective.needs_distances() {
        batch
            .iter()
            .map(|b| DistanceTable::compute(b.features, prototypes))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut grad_d: Vec<Vec<f64>> = if with_grad {
        tables.iter().map(|t| vec![0.0; t.values.len()]).collect()
    } else {
        Vec::new()
    };
    let mut grad_protos = vec![0.0; m * depth];
    let mut grad_valid: Vec<Vec<f64>> = if with_grad {
        valid.iter().map(|v| vec![0.0; v.vector.len()]).collect()
    } else {
        Vec::new()
    };
    let mut grad_head = vec![0.0; head.weights().len()];
    let mut terms = BTreeMap::new();
    let mut weights = BTreeMap::new();
    let mut total = 0.0;

    // Similarities and scores (needed for CE; reported for metrics).
    let mut sims = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut top_sets = Vec::with_capacity(n);
    if !tables.is_empty() {
        for t in &tables {
            let mut s = Vec::with_capacity(m);
            let mut tops = Vec::with_capacity(m);
            for j in 0..m {
                let a: Vec<f64> = t.row(j).iter().map(|&d| similarity(d, eps)).collect();
                let idx = top_indices(&a, config.top_k);
                s.push(idx.iter().map(|&c| a[c]).sum::<f64>() / config.top_k as f64);
                tops.push(idx);
            }
            scores.push(head.apply(&s));
            sims.push(s);
            top_sets.push(tops);
        }
    }

    for &(term, w) in &objective.terms {
        let value = match term {
            Term::CrossEntropy => {
                if tables.is_empty() {
                    return Err(Error::Config("cross-entropy requires distances".into()));
                }
                let cw = |y: usize| objective.class_weights.as_ref().map_or(1.0, |c| c[y]);
                let norm: f64 = labels.iter().map(|&y| cw(y)).sum();
                let mut sum = 0.0;
                for (i, &y) in labels.iter().enumerate() {
                    let wi = cw(y) / norm;
                    sum += wi * cross_entropy(&scores[i], y)?;
                    if with_grad {
                        let mut dl = softmax(&scores[i]);
                        dl[y] -= 1.0;
                        let dl: Vec<f64> = dl.iter().map(|v| v * wi * w).collect();
                        let mut ds = vec![0.0; m];
                        for (k, &g) in dl.iter().enumerate() {
                            for j in 0..m {
                                grad_head[k * m + j] += g * sims[i][j];
                                ds[j] += g * head.weight(k, j);
                            }
                        }
                        let cells = tables[i].cells;
                        for j in 0..m {
                            let share = ds[j] / config.top_k as f64;
                            for &c in &top_sets[i][j] {
                                let d = tables[i].row(j)[c];
                                grad_d[i][j * cells + c] += share * similarity_slope(d, eps);
                            }
                        }
                    }
                }
                sum
            }
            Term::Cluster => cluster_term(
                &tables,
                &classes,
                &labels,
                kappa,
                with_grad.then_some(grad_d.as_mut_slice()),
                w,
            )?,
            Term::Separation => separation_term(
                &tables,
                &classes,
                &labels,
                kappa,
                objective.separation_floor,
                with_grad.then_some(grad_d.as_mut_slice()),
                w,
            )?,
            Term::Mask => {
                let mut plans = Vec::with_capacity(n);
                for b in batch {
                    match b.mask {
                        Some(p) => plans.push(p),
                        None => {
                            return Err(Error::MissingInput(format!(
                                "mask for image `{}` (required by the mask term)",
                                b.id
                            )))
                        }
                    }
                }
                mask_term(
                    &tables,
                    &plans,
                    &classes,
                    &labels,
                    eps,
                    with_grad.then_some(grad_d.as_mut_slice()),
                    w,
                )?
            }
            Term::Remembering => remembering_term(
                valid,
                prototypes,
                eps,
                &mut grad_protos,
                with_grad.then_some(grad_valid.as_mut_slice()),
                if with_grad { w } else { 0.0 },
            )?,
            Term::L1Offclass => {
                if with_grad {
                    for (i, wt) in head.weights().iter().enumerate() {
                        if classes[i % m] != i / m {
                            grad_head[i] += w * sign(*wt);
                        }
                    }
                }
                l1_offclass(head, &classes)
            }
        };
        terms.insert(term.name().to_string(), value);
        weights.insert(term.name().to_string(), w);
        total += w * value;
    }

    // Chain distance gradients into feature maps and prototypes.
    let mut grad_features = Vec::with_capacity(n);
    if with_grad {
        for (i, b) in batch.iter().enumerate() {
            let z = b.features;
            let mut gz = vec![0.0; z.values().len()];
            if let Some(gdi) = grad_d.get(i) {
                for (j, p) in prototypes.iter().enumerate() {
                    let row = tables[i].row(j);
                    for c in 0..tables[i].cells {
                        let g = gdi[j * tables[i].cells + c];
                        let d = row[c];
                        if g == 0.0 || d == 0.0 {
                            continue;
                        }
                        let coef = g / d;
                        let patch = z.patch_at(c);
                        for k in 0..depth {
                            let diff = patch[k] - p.vector[k];
                            gz[c * depth + k] += coef * diff;
                            grad_protos[j * depth + k] -= coef * diff;
                        }
                    }
                }
            }
            grad_features.push(gz);
        }
    }

    Ok(ObjectiveOutput {
        report: LossReport { total, terms, weights },
        grad_features,
        grad_valid,
        grad_prototypes: grad_protos,
        grad_head,
        similarity: sims,
        scores,
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Value-only objective for a supervision mode (no gradients).
pub fn total_objective(
    batch: &[BatchItem<'_>],
    valid: &[ValidPatch],
    prototypes: &[Prototype],
    head: &Head,
    config: &ModelConfig,
    weights: &LossWeights,
    mode: Mode,
) -> Result<LossReport> {
    if mode == Mode::LpLr && weights.lambda4 > 0.0 && valid.is_empty() {
        return Err(Error::Config("mode lp+lr needs a non-empty valid set".into()));
    }
    let objective = Objective::for_mode(mode, weights, config);
    Ok(evaluate_objective(batch, valid, prototypes, head, config, &objective, false)?.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mask::MaskProvenance;

    fn proto(class_id: usize, vector: Vec<f64>) -> Prototype {
        Prototype { class_id, vector, source: None }
    }

    #[test]
    fn cross_entropy_reference_values() {
        assert!((cross_entropy(&[0.0, 0.0], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(cross_entropy(&[1e6, 0.0], 0).unwrap().abs() < 1e-12);
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
        assert!(cross_entropy(&[0.0], 0).is_err());
    }

    #[test]
    fn l1_offclass_init_pattern() {
        let classes: Vec<usize> = (0..18).map(|j| j / 9).collect();
        let head = Head::class_connected(&classes, 2, -0.5);
        assert_eq!(l1_offclass(&head, &classes), 9.0);
        let zero = Head::new(2, 18, vec![0.0; 36]).unwrap();
        assert_eq!(l1_offclass(&zero, &classes), 0.0);
    }

    #[test]
    fn cluster_zero_when_prototype_is_a_patch() {
        let z = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 5.0, 5.0]).unwrap();
        let protos = vec![proto(0, vec![1.0, 2.0]), proto(1, vec![0.0, 0.0])];
        assert_eq!(cluster_loss(&[z], &protos, &[0], 1).unwrap(), 0.0);
    }

    #[test]
    fn cluster_without_class_prototypes_is_config_error() {
        let z = FeatureMap::new(1, 1, 1, vec![0.0]).unwrap();
        let protos = vec![proto(0, vec![1.0])];
        assert!(matches!(cluster_loss(&[z], &protos, &[1], 1), Err(Error::Config(_))));
    }

    #[test]
    fn separation_constant_distance() {
        // every patch at distance 10 from the wrong-class prototype
        let z = FeatureMap::new(2, 2, 1, vec![0.0; 4]).unwrap();
        let protos = vec![proto(0, vec![0.0]), proto(1, vec![10.0])];
        assert_eq!(separation_loss(&[z], &protos, &[0], 1).unwrap(), -10.0);
    }

    #[test]
    fn separation_floor_clamps_value_and_gradient() {
        let z = FeatureMap::new(1, 1, 1, vec![0.0]).unwrap();
        let protos = vec![proto(0, vec![0.0]), proto(1, vec![5000.0])];
        let t = vec![DistanceTable::compute(&z, &protos).unwrap()];
        let mut g = vec![vec![0.0; 2]];
        let v = separation_term(&t, &[0, 1], &[0], 1, -1e3, Some(&mut g), 1.0).unwrap();
        assert_eq!(v, -1e3);
        assert!(g[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mask_all_zero_and_all_one() {
        let pam = Grid::filled(4, 4, 0.7);
        let zeros = LesionMask::new(4, 4, vec![0; 16], MaskProvenance::Synthetic).unwrap();
        let ones = LesionMask::new(4, 4, vec![1; 16], MaskProvenance::Synthetic).unwrap();
        let pams = vec![vec![pam.clone(), pam]];
        assert_eq!(mask_loss(&pams, &[&zeros], &[0, 1], &[0]).unwrap(), 0.0);
        let v = mask_loss(&pams, &[&ones], &[0, 1], &[0]).unwrap();
        assert!((v - 0.7 * 4.0).abs() < 1e-12);
    }

    #[test]
    fn remembering_single_exact_match() {
        let protos = vec![proto(0, vec![0.5, 0.5]), proto(1, vec![3.0, 3.0])];
        let valid = vec![ValidPatch { class_id: 0, vector: vec![0.5, 0.5] }];
        let v = remembering_loss(&valid, &protos, 1e-4).unwrap();
        assert!((v + (1.0f64 / 1e-4).ln()).abs() < 1e-9);
    }

    #[test]
    fn remembering_far_patch_tends_to_zero_from_below() {
        let protos = vec![proto(0, vec![0.0]), proto(1, vec![0.0])];
        let valid = vec![ValidPatch { class_id: 0, vector: vec![1e9] }];
        let v = remembering_loss(&valid, &protos, 1e-4).unwrap();
        assert!(v < 0.0 && v > -1e-6);
    }

    #[test]
    fn remembering_empty_set_errors() {
        let protos = vec![proto(0, vec![0.0])];
        assert!(matches!(remembering_loss(&[], &protos, 1e-4), Err(Error::Config(_))));
    }

    #[test]
    fn weighted_total_arithmetic() {
        let config = ModelConfig::tiny(1, 2);
        let z = FeatureMap::new(7, 7, 2, (0..98).map(|i| (i as f64 * 0.1).sin()).collect()).unwrap();
        let protos = vec![proto(0, vec![0.1, 0.2]), proto(1, vec![-0.3, 0.4])];
        let head = Head::class_connected(&[0, 1], 2, -0.5);
        let batch = [BatchItem { id: "a", features: &z, label: 0, mask: None }];
        let w = LossWeights::default();
        let report = total_objective(&batch, &[], &protos, &head, &config, &w, Mode::Lp).unwrap();
        let expected = report.terms["cross_entropy"]
            + 0.8 * report.terms["cluster"]
            + 0.08 * report.terms["separation"];
        assert!((report.total - expected).abs() <= 1e-9 * expected.abs());

        let off = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, lambda4: 0.0, ..w };
        let r = total_objective(&batch, &[], &protos, &head, &config, &off, Mode::Lp).unwrap();
        assert_eq!(r.total, r.terms["cross_entropy"]);
    }

    #[test]
    fn mask_mode_without_mask_names_image() {
        let config = ModelConfig::tiny(1, 2);
        let z = FeatureMap::new(7, 7, 2, vec![0.0; 98]).unwrap();
        let protos = vec![proto(0, vec![0.1, 0.2]), proto(1, vec![-0.3, 0.4])];
        let head = Head::class_connected(&[0, 1], 2, -0.5);
        let batch = [BatchItem { id: "img-42", features: &z, label: 0, mask: None }];
        let err = total_objective(&batch, &[], &protos, &head, &config, &LossWeights::default(), Mode::LpLm)
            .unwrap_err();
        assert!(err.to_string().contains("img-42"), "{err}");
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("lp+lm".parse::<Mode>().unwrap(), Mode::LpLm);
        assert_eq!("LP+LR".parse::<Mode>().unwrap(), Mode::LpLr);
        assert!("lp+x".parse::<Mode>().is_err());
    }
}
