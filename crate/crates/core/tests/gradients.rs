//! Analytic gradients against central finite differences.

use protopart_core::data::{LesionMask, MaskProvenance};
use protopart_core::losses::{evaluate_objective, BatchItem, LossWeights, MaskPlan, Objective, Term, ValidPatch};
use protopart_core::model::{EmbedPass, FeatureMap, ModelConfig, ProtoPartModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

struct Instance {
    model: ProtoPartModel,
    /// Trunk outputs (CHW) standing in for images.
    images: Vec<Vec<f64>>,
    labels: Vec<usize>,
    masks: Vec<MaskPlan>,
    valid_images: Vec<Vec<f64>>,
    valid_cells: Vec<(usize, usize, usize)>,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(2..=8);
    let mut config = ModelConfig::tiny(2, depth);
    config.init_seed = seed;
    config.top_k = rng.random_range(1..=5);
    let mut model = ProtoPartModel::init(config).unwrap();
    // pull prototypes into the tanh range so distances vary
    for p in &mut model.prototypes {
        for v in &mut p.vector {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    // live hidden units, otherwise dead cells collapse to identical patches
    let (c, d) = (model.addon.in_channels(), depth);
    for b in &mut model.addon.params_mut()[d * c..d * c + d] {
        *b = 1.0;
    }
    for w in model.head.weights_mut() {
        *w += rng.random_range(-0.3..0.3);
    }
    let side = model.config.input_side;
    // random trunk outputs keep cells distinct, so selections have no ties
    let channels = model.addon.in_channels();
    let image = |rng: &mut ChaCha8Rng, _id: String| -> Vec<f64> {
        (0..channels * 49).map(|_| rng.random_range(0.0..2.0)).collect()
    };
    let n = 3;
    let images: Vec<_> = (0..n).map(|i| image(&mut rng, format!("i{i}"))).collect();
    let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize) % 2).collect();
    let masks = (0..n)
        .map(|_| {
            let bits = (0..side * side).map(|_| rng.random_bool(0.6) as u8).collect();
            let m = LesionMask::new(side, side, bits, MaskProvenance::Synthetic).unwrap();
            MaskPlan::new(&m, 7, 7).unwrap()
        })
        .collect();
    let valid_images: Vec<_> = (0..2).map(|i| image(&mut rng, format!("v{i}"))).collect();
    let valid_cells = (0..4)
        .map(|e| (e % 2, rng.random_range(0..49), e % 2))
        .collect();
    Instance { model, images, labels, masks, valid_images, valid_cells }
}

fn embed_pass(model: &ProtoPartModel, trunk: &[f64]) -> EmbedPass {
    let (addon, features) = model.embed_from_trunk(trunk).unwrap();
    EmbedPass { trunk: None, addon, features }
}

fn objective(term: Term, model: &ProtoPartModel) -> Objective {
    Objective::single(term, &LossWeights::default(), &model.config)
}

fn valid_patches(maps: &[FeatureMap], cells: &[(usize, usize, usize)]) -> Vec<ValidPatch> {
    cells
        .iter()
        .map(|&(k, cell, class)| ValidPatch { class_id: class, vector: maps[k].patch_at(cell).to_vec() })
        .collect()
}

/// Objective value with features computed from the current model.
fn value(inst: &Instance, model: &ProtoPartModel, term: Term) -> f64 {
    let maps: Vec<FeatureMap> = inst.images.iter().map(|im| model.embed_from_trunk(im).unwrap().1).collect();
    let vmaps: Vec<FeatureMap> = inst.valid_images.iter().map(|im| model.embed_from_trunk(im).unwrap().1).collect();
    value_from(inst, model, term, &maps, &valid_patches(&vmaps, &inst.valid_cells))
}

fn value_from(inst: &Instance, model: &ProtoPartModel, term: Term, maps: &[FeatureMap], valid: &[ValidPatch]) -> f64 {
    let batch: Vec<BatchItem<'_>> = maps
        .iter()
        .enumerate()
        .map(|(i, z)| BatchItem { id: "x", features: z, label: inst.labels[i], mask: Some(&inst.masks[i]) })
        .collect();
    let obj = objective(term, model);
    evaluate_objective(&batch, valid, &model.prototypes, &model.head, &model.config, &obj, false)
        .unwrap()
        .report
        .total
}

struct Analytic {
    prototypes: Vec<f64>,
    features: Vec<Vec<f64>>,
    valid: Vec<Vec<f64>>,
    addon: Vec<f64>,
    head: Vec<f64>,
}

fn analytic(inst: &Instance, term: Term) -> Analytic {
    let model = &inst.model;
    let passes: Vec<_> = inst.images.iter().map(|im| embed_pass(model, im)).collect();
    let vpasses: Vec<_> = inst.valid_images.iter().map(|im| embed_pass(model, im)).collect();
    let vmaps: Vec<FeatureMap> = vpasses.iter().map(|p| p.features.clone()).collect();
    let valid = valid_patches(&vmaps, &inst.valid_cells);
    let batch: Vec<BatchItem<'_>> = passes
        .iter()
        .enumerate()
        .map(|(i, p)| BatchItem { id: "x", features: &p.features, label: inst.labels[i], mask: Some(&inst.masks[i]) })
        .collect();
    let obj = objective(term, model);
    let out = evaluate_objective(&batch, &valid, &model.prototypes, &model.head, &model.config, &obj, true).unwrap();
    let mut addon = vec![0.0; model.addon.params().len()];
    for (p, g) in passes.iter().zip(&out.grad_features) {
        model.backward_features(p, g, &mut addon, None);
    }
    let depth = model.config.depth;
    let mut gz = vec![vec![0.0; 49 * depth]; vpasses.len()];
    for (e, &(k, cell, _)) in inst.valid_cells.iter().enumerate() {
        for d in 0..depth {
            gz[k][cell * depth + d] += out.grad_valid.get(e).map_or(0.0, |g| g[d]);
        }
    }
    for (p, g) in vpasses.iter().zip(&gz) {
        model.backward_features(p, g, &mut addon, None);
    }
    Analytic {
        prototypes: out.grad_prototypes,
        features: out.grad_features,
        valid: out.grad_valid,
        addon,
        head: out.grad_head,
    }
}

fn central(f: impl Fn(f64) -> f64) -> f64 {
    (f(H) - f(-H)) / (2.0 * H)
}

/// Norm-wise relative error; exact zeros on both sides count as agreement.
fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn check_prototypes(inst: &Instance, term: Term, a: &Analytic) -> f64 {
    let depth = inst.model.config.depth;
    let mut numeric = Vec::new();
    for j in 0..inst.model.prototypes.len() {
        for k in 0..depth {
            numeric.push(central(|h| {
                let mut m = inst.model.clone();
                m.prototypes[j].vector[k] += h;
                value(inst, &m, term)
            }));
        }
    }
    rel_error(&a.prototypes, &numeric)
}

fn check_features(inst: &Instance, term: Term, a: &Analytic) -> f64 {
    let model = &inst.model;
    let maps: Vec<FeatureMap> = inst.images.iter().map(|im| model.embed_from_trunk(im).unwrap().1).collect();
    let vmaps: Vec<FeatureMap> = inst.valid_images.iter().map(|im| model.embed_from_trunk(im).unwrap().1).collect();
    let valid = valid_patches(&vmaps, &inst.valid_cells);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for i in 0..maps.len() {
        for c in 0..maps[i].values().len() {
            analytic.push(a.features[i][c]);
            numeric.push(central(|h| {
                let mut m = maps.clone();
                m[i].values_mut()[c] += h;
                value_from(inst, model, term, &m, &valid)
            }));
        }
    }
    for e in 0..valid.len() {
        for d in 0..valid[e].vector.len() {
            analytic.push(a.valid.get(e).map_or(0.0, |g| g[d]));
            numeric.push(central(|h| {
                let mut v = valid.clone();
                v[e].vector[d] += h;
                value_from(inst, model, term, &maps, &v)
            }));
        }
    }
    rel_error(&analytic, &numeric)
}

fn check_addon(inst: &Instance, term: Term, a: &Analytic) -> f64 {
    let numeric: Vec<f64> = (0..inst.model.addon.params().len())
        .map(|i| {
            central(|h| {
                let mut m = inst.model.clone();
                m.addon.params_mut()[i] += h;
                value(inst, &m, term)
            })
        })
        .collect();
    rel_error(&a.addon, &numeric)
}

fn check_head(inst: &Instance, term: Term, a: &Analytic) -> f64 {
    let numeric: Vec<f64> = (0..inst.model.head.weights().len())
        .map(|i| {
            central(|h| {
                let mut m = inst.model.clone();
                m.head.weights_mut()[i] += h;
                value(inst, &m, term)
            })
        })
        .collect();
    rel_error(&a.head, &numeric)
}

fn suite(term: Term, groups: &[&str]) {
    for seed in 0..INSTANCES {
        let inst = instance(seed * 7 + term as u64);
        let a = analytic(&inst, term);
        for &g in groups {
            let err = match g {
                "prototypes" => check_prototypes(&inst, term, &a),
                "features" => check_features(&inst, term, &a),
                "addon" => check_addon(&inst, term, &a),
                "head" => check_head(&inst, term, &a),
                _ => unreachable!(),
            };
            assert!(err < TOL, "{term:?} seed {seed} group {g}: relative error {err:e}");
        }
    }
}

#[test]
pub fn cluster_gradients() {
    suite(Term::Cluster, &["prototypes", "features", "addon"]);
}

#[test]
pub fn separation_gradients() {
    suite(Term::Separation, &["prototypes", "features", "addon"]);
}

#[test]
pub fn mask_gradients() {
    suite(Term::Mask, &["prototypes", "features", "addon"]);
}

#[test]
pub fn remembering_gradients() {
    suite(Term::Remembering, &["prototypes", "features", "addon"]);
}

#[test]
pub fn l1_offclass_gradients() {
    suite(Term::L1Offclass, &["head"]);
}

#[test]
pub fn cross_entropy_gradients() {
    suite(Term::CrossEntropy, &["prototypes", "features", "addon", "head"]);
}
