use protopart_core::checkpoint::Checkpoint;
use protopart_core::data::synth::{generate, to_samples, SynthConfig};
use protopart_core::data::{channel_stats, Sample, Split};
use protopart_core::losses::{l1_offclass, LossWeights, Mode};
use protopart_core::model::{ModelConfig, ProtoPartModel};
use protopart_core::trainer::{Stage, TrainConfig, TrainData, Trainer};
use protopart_core::Error;
use serde_json::Value;

fn split(n: usize, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let imgs = generate(&SynthConfig { n_per_class: n, seed, ..SynthConfig::default() }).unwrap();
    let samples = to_samples(&imgs);
    let train = samples.iter().filter(|s| s.split == Split::Train).cloned().collect();
    let val = samples.iter().filter(|s| s.split == Split::Val).cloned().collect();
    (train, val)
}

fn model(train: &[Sample], per_class: usize, seed: u64) -> ProtoPartModel {
    let (mean, std) = channel_stats(train.iter().map(|s| &s.image));
    let mc = ModelConfig {
        depth: 8,
        prototypes_per_class: per_class,
        pixel_mean: mean,
        pixel_std: std,
        init_seed: seed,
        ..ModelConfig::default()
    };
    ProtoPartModel::init(mc).unwrap()
}

fn toy(n: usize, per_class: usize, config: TrainConfig, weights: LossWeights) -> Trainer {
    let (train, val) = split(n, config.seed);
    let m = model(&train, per_class, config.seed);
    Trainer::new(m, config, weights, TrainData { train, val, valid: vec![] }).unwrap()
}

fn short(epochs: usize, projections: Vec<usize>, last_layer_iters: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        projection_epochs: projections,
        last_layer_iters,
        batch_size: 10,
        seed: 4,
        ..TrainConfig::default()
    }
}

fn steps(t: &Trainer) -> Vec<Value> {
    t.log().of_type("step").cloned().collect()
}

fn stage_of(r: &Value) -> String {
    r["stage"].as_str().unwrap().to_string()
}

#[test]
pub fn schedule_follows_the_stage_table() {
    let mut t = toy(15, 9, TrainConfig { batch_size: 10, seed: 1, ..TrainConfig::default() }, LossWeights::default());
    t.train().unwrap();
    let records = t.log().records();

    let projections: Vec<u64> = t.log().of_type("projection").map(|r| r["epoch"].as_u64().unwrap()).collect();
    assert_eq!(projections, vec![5, 10, 15, 20]);

    for r in t.log().of_type("step") {
        let e = r["epoch"].as_u64().unwrap();
        let s = stage_of(r);
        match s.as_str() {
            "warmup" => assert!(e < 5, "warm-up step in epoch {e}"),
            "joint" => assert!(e >= 5),
            "last_layer" => assert!(projections.contains(&e)),
            other => panic!("unexpected step stage {other}"),
        }
    }
    for e in 0..21u64 {
        let n = t.log().of_type("step").filter(|r| r["epoch"] == e && stage_of(r) != "last_layer").count();
        assert!(n > 0, "epoch {e} has no training steps");
    }

    // projection, then exactly 10 last-layer passes, then the next epoch
    for &p in &projections {
        let at = records.iter().position(|r| r["type"] == "projection" && r["epoch"] == p).unwrap();
        let next = records
            .iter()
            .position(|r| r["type"] == "step" && r["epoch"].as_u64().unwrap() > p)
            .unwrap_or(records.len());
        assert!(at < next);
        let mut iters: Vec<u64> = records[at..next]
            .iter()
            .filter(|r| r["type"] == "step")
            .map(|r| {
                assert_eq!(stage_of(r), "last_layer");
                r["iteration"].as_u64().unwrap()
            })
            .collect();
        iters.dedup();
        assert_eq!(iters, (0..10).collect::<Vec<_>>(), "after projection {p}");
    }

    // weight hashes: only the stage's groups move, and the moving group did move
    for r in t.log().of_type("stage") {
        let stage: Stage = serde_json::from_value(r["stage"].clone()).unwrap();
        let before = r["before"].as_object().unwrap();
        let after = r["after"].as_object().unwrap();
        let changed: Vec<&str> = before.keys().filter(|k| before[*k] != after[*k]).map(|k| k.as_str()).collect();
        let logged: Vec<&str> = r["changed"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        assert_eq!(changed, logged);
        for g in &changed {
            assert!(stage.trainable().contains(g), "{stage} changed {g}");
        }
        match stage {
            Stage::Warmup => assert!(!changed.contains(&"trunk") && !changed.contains(&"head")),
            Stage::LastLayer => assert_eq!(changed, vec!["head"]),
            Stage::Joint => assert!(changed.contains(&"trunk")),
            _ => {}
        }
    }

    let resets: Vec<(String, String)> = t
        .log()
        .of_type("optimizer_reset")
        .map(|r| (r["from"].as_str().unwrap().to_string(), r["to"].as_str().unwrap().to_string()))
        .collect();
    assert_eq!(resets[0], ("init".into(), "warmup".into()));
    assert_eq!(resets[1], ("warmup".into(), "joint".into()));
    assert_eq!(resets.iter().filter(|(_, to)| to == "last_layer").count(), 4);
}

#[test]
pub fn identical_seeds_give_identical_logs() {
    let run = || {
        let mut t = toy(15, 3, short(7, vec![5], 2), LossWeights::default());
        t.train().unwrap();
        let evals: Vec<Value> = t.log().of_type("eval").cloned().collect();
        (steps(&t), evals, t.model)
    };
    let (a, ea, ma) = run();
    let (b, eb, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ea, eb);
    assert_eq!(ma, mb);
}

#[test]
pub fn resuming_from_a_saved_checkpoint_changes_nothing() {
    let config = short(8, vec![5], 2);
    let mut straight = toy(15, 3, config.clone(), LossWeights::default());
    straight.train().unwrap();

    let mut first = toy(15, 3, config, LossWeights::default());
    for _ in 0..6 {
        first.run_epoch().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ppt");
    first.checkpoint(None).save(&path).unwrap();
    let data = first.data().clone();
    let mut resumed = Trainer::resume(Checkpoint::load(&path).unwrap(), data).unwrap();
    resumed.train().unwrap();

    let tail = |t: &Trainer| -> Vec<Value> { steps(t).into_iter().filter(|r| r["epoch"].as_u64().unwrap() >= 6).collect() };
    let want = tail(&straight);
    assert!(!want.is_empty());
    assert_eq!(tail(&resumed), want);
    assert_eq!(resumed.model, straight.model);
}

/// Runs warm-up and the first joint epoch, then projects.
fn projected(config: TrainConfig, weights: LossWeights) -> Trainer {
    let mut t = toy(15, 3, config, weights);
    for e in 0..=5 {
        if e < 5 {
            t.run_warmup(e).unwrap();
        } else {
            t.run_joint_epoch(e).unwrap();
        }
    }
    t.project(5).unwrap();
    t
}

fn off_class(t: &Trainer) -> Vec<f64> {
    let m = t.model.prototypes.len();
    let classes = t.model.prototype_classes();
    let w = t.model.head.weights();
    (0..w.len()).filter(|i| classes[i % m] != i / m).map(|i| w[i].abs()).collect()
}

#[test]
pub fn huge_l1_weight_shrinks_off_class_weights_monotonically() {
    let weights = LossWeights { lambda5: 1e6, ..LossWeights::default() };
    let mut t = projected(short(6, vec![5], 1), weights);
    let protos = t.model.prototypes.clone();
    let mut prev = off_class(&t);
    for _ in 0..10 {
        t.run_last_layer(5).unwrap();
        let now = off_class(&t);
        for (a, b) in now.iter().zip(&prev) {
            assert!(a < b, "off-class magnitude grew from {b} to {a}");
        }
        prev = now;
    }
    assert_eq!(t.model.prototypes, protos);
}

/// At the default weight the cross-entropy gradient dominates and the raw
/// off-class L1 can drift either way; the penalty still leaves it below an
/// unpenalized run from the same state.
#[test]
pub fn default_l1_weight_lowers_off_class_l1_against_no_penalty() {
    for seed in 0..4 {
        let run = |l5: f64| {
            let weights = LossWeights { lambda5: l5, ..LossWeights::default() };
            let mut t = projected(TrainConfig { seed, ..short(6, vec![5], 10) }, weights);
            t.run_last_layer(5).unwrap();
            l1_offclass(&t.model.head, &t.model.prototype_classes())
        };
        let (free, penalized) = (run(0.0), run(1e-4));
        assert!(penalized < free, "seed {seed}: {penalized} vs {free}");
    }
}

#[test]
pub fn cluster_term_falls_over_ten_epochs() {
    let mut t = toy(15, 3, short(10, vec![], 0), LossWeights::default());
    t.train().unwrap();
    let mean = |e: u64| {
        let v: Vec<f64> = steps(&t).iter().filter(|r| r["epoch"] == e).map(|r| r["cluster"].as_f64().unwrap()).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(9) < mean(0), "cluster {} -> {}", mean(0), mean(9));
}

#[test]
pub fn mode_inputs_are_required() {
    let (mut train, val) = split(15, 0);
    for s in &mut train {
        s.mask = None;
    }
    let m = model(&train, 3, 0);
    let c = TrainConfig { mode: Mode::LpLm, ..short(7, vec![5], 1) };
    let err = Trainer::new(m.clone(), c, LossWeights::default(), TrainData { train: train.clone(), val: val.clone(), valid: vec![] })
        .err()
        .unwrap();
    assert!(matches!(err, Error::MissingInput(_)), "{err}");
    assert!(err.to_string().contains("--masks"));

    let c = TrainConfig { mode: Mode::LpLr, ..short(7, vec![5], 1) };
    let err = Trainer::new(m, c, LossWeights::default(), TrainData { train, val, valid: vec![] }).err().unwrap();
    assert!(err.to_string().contains("valid set"), "{err}");
}

#[test]
pub fn too_few_images_for_projection_is_rejected_up_front() {
    let (train, val) = split(5, 0);
    let m = model(&train, 9, 0);
    let err = Trainer::new(m, short(7, vec![5], 1), LossWeights::default(), TrainData { train, val, valid: vec![] })
        .err()
        .unwrap();
    assert!(err.is_validation());
    assert!(err.to_string().contains("class 0"), "{err}");
}
