//! The three-stage schedule: warm-up, joint epochs, and at projection epochs
//! a projection followed by last-layer iterations.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, ResumeState, SourceRow};
use crate::data::{Sample, ValidEntry};
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{evaluate_objective, BatchItem, LossReport, LossWeights, MaskPlan, Mode, Objective, ValidPatch};
use crate::model::ops::{adaptive_bin, l2_distance};
use crate::model::{Backbone, EmbedPass, FeatureMap, InputImage, ProtoPartModel};
use crate::optim::{Adam, StepDecay};
use crate::projection::{project_prototypes, LatentSample, ProjectionResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs `0..warmup_epochs` are warm-up.
    pub warmup_epochs: usize,
    pub projection_epochs: Vec<usize>,
    /// Passes over the training set with only the head trainable.
    pub last_layer_iters: usize,
    pub batch_size: usize,
    pub lr_features: f64,
    pub lr_addon: f64,
    pub lr_addon_warmup: f64,
    pub lr_prototypes: f64,
    pub lr_prototypes_warmup: f64,
    pub lr_last_layer: f64,
    /// Joint-epoch learning rates decay by `lr_decay` every `lr_step_size` joint epochs.
    pub lr_step_size: usize,
    pub lr_decay: f64,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 21,
            warmup_epochs: 5,
            projection_epochs: vec![5, 10, 15, 20],
            last_layer_iters: 10,
            batch_size: 75,
            lr_features: 2e-4,
            lr_addon: 3e-3,
            lr_addon_warmup: 2e-3,
            lr_prototypes: 3e-3,
            lr_prototypes_warmup: 3e-3,
            lr_last_layer: 1e-3,
            lr_step_size: 5,
            lr_decay: 0.5,
            seed: 0,
            mode: Mode::Lp,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.epochs == 0 {
            p.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            p.push("batch_size must be positive".to_string());
        }
        if self.warmup_epochs > self.epochs {
            p.push(format!("warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs));
        }
        let mut sorted = self.projection_epochs.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.projection_epochs {
            p.push("projection_epochs must be strictly increasing".to_string());
        }
        for &e in &self.projection_epochs {
            if e >= self.epochs {
                p.push(format!("projection epoch {e} outside 0..{}", self.epochs));
            }
            if e < self.warmup_epochs {
                p.push(format!("projection epoch {e} falls inside warm-up"));
            }
        }
        for (name, v) in [
            ("lr_features", self.lr_features),
            ("lr_addon", self.lr_addon),
            ("lr_addon_warmup", self.lr_addon_warmup),
            ("lr_prototypes", self.lr_prototypes),
            ("lr_prototypes_warmup", self.lr_prototypes_warmup),
            ("lr_last_layer", self.lr_last_layer),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                p.push(format!("{name} must be a non-negative finite number"));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            p.push(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    pub fn is_projection_epoch(&self, epoch: usize) -> bool {
        self.projection_epochs.contains(&epoch)
    }

    fn decay(&self) -> StepDecay {
        StepDecay { step_size: self.lr_step_size, gamma: self.lr_decay }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Warmup,
    Joint,
    Projection,
    LastLayer,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Warmup => "warmup",
            Stage::Joint => "joint",
            Stage::Projection => "projection",
            Stage::LastLayer => "last_layer",
        }
    }

    /// Parameter groups a stage may modify.
    pub fn trainable(self) -> &'static [&'static str] {
        match self {
            Stage::Init => &[],
            Stage::Warmup => &["addon", "prototypes"],
            Stage::Joint => &["trunk", "addon", "prototypes"],
            Stage::Projection => &["prototypes"],
            Stage::LastLayer => &["head"],
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn uses_optimizer(self) -> bool {
        matches!(self, Stage::Warmup | Stage::Joint | Stage::LastLayer)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One Adam state per parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub trunk: Adam,
    pub addon: Adam,
    pub prototypes: Adam,
    pub head: Adam,
}

impl Optimizers {
    pub fn new(model: &ProtoPartModel) -> Self {
        Self {
            trunk: Adam::new(model.backbone.params().len()),
            addon: Adam::new(model.addon.params().len()),
            prototypes: Adam::new(model.prototypes.len() * model.config.depth),
            head: Adam::new(model.head.weights().len()),
        }
    }

    pub fn reset(&mut self) {
        self.trunk.reset();
        self.addon.reset();
        self.prototypes.reset();
        self.head.reset();
    }
}

/// SHA-256 of each parameter group, for stage-exclusivity checks.
pub fn group_hashes(model: &ProtoPartModel) -> BTreeMap<String, String> {
    fn digest<'a>(values: impl Iterator<Item = &'a f64>) -> String {
        let mut h = Sha256::new();
        for v in values {
            h.update(v.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }
    let mut out = BTreeMap::new();
    out.insert("trunk".to_string(), digest(model.backbone.params().iter()));
    out.insert("addon".to_string(), digest(model.addon.params().iter()));
    out.insert(
        "prototypes".to_string(),
        digest(model.prototypes.iter().flat_map(|p| p.vector.iter())),
    );
    out.insert("head".to_string(), digest(model.head.weights().iter()));
    out
}

/// A valid-set entry together with its image.
#[derive(Debug, Clone)]
pub struct ValidImage {
    pub entry: ValidEntry,
    pub image: InputImage,
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub valid: Vec<ValidImage>,
}

/// JSON-lines training log, kept in memory and optionally mirrored to a file.
#[derive(Debug, Default)]
pub struct TrainLog {
    records: Vec<Value>,
    file: Option<(PathBuf, BufWriter<File>)>,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path, append: bool) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { records: Vec::new(), file: Some((path.to_path_buf(), BufWriter::new(f))) })
    }

    pub fn push(&mut self, record: Value) -> Result<()> {
        if let Some((path, w)) = &mut self.file {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n").map_err(|e| Error::io(path.as_path(), e))?;
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[Value] {
        &self.records
    }

    pub fn of_type<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Value> + 'a {
        self.records.iter().filter(move |r| r["type"] == kind)
    }
}

/// Latent cell whose input-space tile contains the bbox center.
pub fn bbox_cell(bbox: [usize; 4], latent_side: usize, input_side: usize) -> (usize, usize) {
    let [x, y, w, h] = bbox;
    let find = |v: usize| {
        (0..latent_side)
            .find(|&i| {
                let (a, b) = adaptive_bin(i, input_side, latent_side);
                v >= a && v < b
            })
            .unwrap_or(latent_side - 1)
    };
    (find(y + h / 2), find(x + w / 2))
}

fn shuffle_seed(seed: u64, epoch: usize, stage: Stage, iteration: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.update([stage.code()]);
    h.update((iteration as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

struct ValidLayout {
    images: Vec<InputImage>,
    /// Per entry: (index into `images`, latent cell, class).
    cells: Vec<(usize, usize, usize)>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub weights: LossWeights,
    pub model: ProtoPartModel,
    pub optim: Optimizers,
    /// Next epoch to run.
    pub next_epoch: usize,
    pub step: u64,
    pub stage: Stage,
    pub best_score: Option<f64>,
    pub best: Option<Checkpoint>,
    pub last_checkpoint: Option<PathBuf>,
    data: TrainData,
    plans: Vec<Option<MaskPlan>>,
    valid: ValidLayout,
    trunk_cache: Option<(String, Vec<Vec<f64>>, Vec<Vec<f64>>)>,
    cache_dir: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    log: TrainLog,
}

impl Trainer {
    pub fn new(model: ProtoPartModel, config: TrainConfig, weights: LossWeights, data: TrainData) -> Result<Self> {
        let optim = Optimizers::new(&model);
        Self::build(model, config, weights, data, optim)
    }

    /// Continues a run from a checkpoint that carries resume state.
    pub fn resume(checkpoint: Checkpoint, data: TrainData) -> Result<Self> {
        let Some(r) = checkpoint.resume else {
            return Err(Error::Validation(vec!["checkpoint carries no resume state".into()]));
        };
        let mut t = Self::build(checkpoint.model, r.train, r.weights, data, r.optim)?;
        t.next_epoch = r.next_epoch;
        t.step = r.step;
        t.stage = r.stage;
        t.best_score = r.best_score;
        Ok(t)
    }

    fn build(
        model: ProtoPartModel,
        config: TrainConfig,
        weights: LossWeights,
        data: TrainData,
        optim: Optimizers,
    ) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        weights.validate(&model.config)?;
        let mc = &model.config;
        let mut problems = Vec::new();
        if data.train.is_empty() {
            problems.push("training split is empty".to_string());
        }
        for s in data.train.iter().chain(&data.val) {
            if s.image.side != mc.input_side {
                problems.push(format!("image `{}` is {0}x{0}, model expects {1}", s.id(), mc.input_side));
            }
            if s.label >= mc.num_classes {
                problems.push(format!("image `{}` has label {} outside 0..{}", s.id(), s.label, mc.num_classes));
            }
        }
        if !config.projection_epochs.is_empty() {
            for c in 0..mc.num_classes {
                let n = data.train.iter().filter(|s| s.label == c).count();
                if n < mc.prototypes_per_class {
                    problems.push(format!(
                        "class {c}: {n} training images but projection needs at least {}",
                        mc.prototypes_per_class
                    ));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }

        let plans = if config.mode == Mode::LpLm {
            let missing: Vec<&str> = data.train.iter().filter(|s| s.mask.is_none()).map(|s| s.id()).collect();
            if !missing.is_empty() {
                return Err(Error::MissingInput(format!(
                    "lesion masks (required by mode lp+lm; pass --masks) for {} training images, first `{}`",
                    missing.len(),
                    missing[0]
                )));
            }
            data.train
                .iter()
                .map(|s| s.mask.as_ref().map(|m| MaskPlan::new(m, mc.latent_side, mc.latent_side)).transpose())
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![None; data.train.len()]
        };

        if config.mode == Mode::LpLr && data.valid.is_empty() {
            return Err(Error::Config("mode lp+lr needs a non-empty valid set (pass --valid-set)".into()));
        }
        let mut images: Vec<InputImage> = Vec::new();
        let mut cells = Vec::new();
        let mut bad = Vec::new();
        for (i, v) in data.valid.iter().enumerate() {
            if v.entry.class >= mc.num_classes {
                bad.push(format!("valid entry {i}: class {} outside 0..{}", v.entry.class, mc.num_classes));
                continue;
            }
            if v.image.side != mc.input_side {
                bad.push(format!("valid entry {i}: image `{}` has wrong size", v.image.id));
                continue;
            }
            let idx = match images.iter().position(|im| im.id == v.image.id) {
                Some(k) => k,
                None => {
                    images.push(v.image.clone());
                    images.len() - 1
                }
            };
            let (r, c) = bbox_cell(v.entry.bbox, mc.latent_side, mc.input_side);
            cells.push((idx, r * mc.latent_side + c, v.entry.class));
        }
        if !bad.is_empty() {
            return Err(Error::Validation(bad));
        }

        Ok(Self {
            config,
            weights,
            model,
            optim,
            next_epoch: 0,
            step: 0,
            stage: Stage::Init,
            best_score: None,
            best: None,
            last_checkpoint: None,
            data,
            plans,
            valid: ValidLayout { images, cells },
            trunk_cache: None,
            cache_dir: None,
            out_dir: None,
            log: TrainLog::in_memory(),
        })
    }

    /// Writes `log.jsonl` and checkpoints under `dir`. Appends to an existing
    /// log when resuming.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let resuming = self.next_epoch > 0 || self.step > 0;
        self.log = TrainLog::to_file(&dir.join("log.jsonl"), resuming)?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    /// Persists warm-up trunk outputs under `dir`, keyed by trunk weights and pixels.
    pub fn with_cache_dir(mut self, dir: Option<PathBuf>) -> Self {
        self.cache_dir = dir;
        self
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    pub fn train(&mut self) -> Result<()> {
        if self.next_epoch == 0 && self.step == 0 {
            self.log_start()?;
        } else {
            self.log.push(json!({"type": "resume", "epoch": self.next_epoch, "step": self.step}))?;
        }
        while self.next_epoch < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    fn log_start(&mut self) -> Result<()> {
        let rec = json!({
            "type": "start",
            "mode": self.config.mode,
            "seed": self.config.seed,
            "model": crate::checkpoint::model_digest(&self.model),
            "n_train": self.data.train.len(),
            "n_val": self.data.val.len(),
            "n_valid": self.data.valid.len(),
        });
        self.log.push(rec)?;
        if !self.valid.cells.is_empty() {
            let d = self.valid_distance()?;
            self.log.push(json!({"type": "valid_distance", "epoch": 0, "when": "start", "mean": d}))?;
        }
        Ok(())
    }

    /// Runs one epoch of the schedule, including projection and last-layer
    /// iterations when the epoch is a projection epoch.
    pub fn run_epoch(&mut self) -> Result<()> {
        let e = self.next_epoch;
        if e < self.config.warmup_epochs {
            self.run_warmup(e)?;
        } else {
            self.run_joint_epoch(e)?;
        }
        let projected = self.config.is_projection_epoch(e);
        if projected {
            self.project(e)?;
            self.run_last_layer(e)?;
        }
        let score = self.epoch_end(e)?;
        self.next_epoch = e + 1;
        if projected {
            self.after_projection(e, score)?;
        }
        Ok(())
    }

    fn begin_stage(&mut self, stage: Stage, epoch: usize) -> Result<BTreeMap<String, String>> {
        if stage.uses_optimizer() && stage != self.stage {
            self.optim.reset();
            self.log.push(json!({
                "type": "optimizer_reset",
                "epoch": epoch,
                "from": self.stage,
                "to": stage,
            }))?;
        }
        self.stage = stage;
        Ok(group_hashes(&self.model))
    }

    fn end_stage(&mut self, stage: Stage, epoch: usize, before: BTreeMap<String, String>) -> Result<()> {
        let after = group_hashes(&self.model);
        let changed: Vec<&String> = after.keys().filter(|k| before[*k] != after[*k]).collect();
        let frozen: Vec<&&String> = changed.iter().filter(|g| !stage.trainable().contains(&g.as_str())).collect();
        if !frozen.is_empty() {
            return Err(Error::Numeric(format!("stage {stage} modified frozen groups {frozen:?}")));
        }
        let rec = json!({
            "type": "stage",
            "epoch": epoch,
            "stage": stage,
            "before": before,
            "after": after,
            "changed": changed,
        });
        self.log.push(rec)
    }

    fn order(&self, epoch: usize, stage: Stage, iteration: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.data.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed(self.config.seed, epoch, stage, iteration));
        idx.shuffle(&mut rng);
        idx
    }

    pub fn run_warmup(&mut self, epoch: usize) -> Result<()> {
        let before = self.begin_stage(Stage::Warmup, epoch)?;
        self.fill_trunk_cache()?;
        let lrs = [("addon", self.config.lr_addon_warmup), ("prototypes", self.config.lr_prototypes_warmup)];
        let order = self.order(epoch, Stage::Warmup, 0);
        for batch in order.chunks(self.config.batch_size) {
            self.prototype_step(batch, epoch, Stage::Warmup, &lrs)?;
        }
        self.end_stage(Stage::Warmup, epoch, before)
    }

    pub fn run_joint_epoch(&mut self, epoch: usize) -> Result<()> {
        let before = self.begin_stage(Stage::Joint, epoch)?;
        self.trunk_cache = None;
        let f = self.config.decay().factor(epoch.saturating_sub(self.config.warmup_epochs));
        let lrs = [
            ("trunk", self.config.lr_features * f),
            ("addon", self.config.lr_addon * f),
            ("prototypes", self.config.lr_prototypes * f),
        ];
        let order = self.order(epoch, Stage::Joint, 0);
        for batch in order.chunks(self.config.batch_size) {
            self.prototype_step(batch, epoch, Stage::Joint, &lrs)?;
        }
        self.end_stage(Stage::Joint, epoch, before)
    }

    pub fn project(&mut self, epoch: usize) -> Result<ProjectionResult> {
        let before = self.begin_stage(Stage::Projection, epoch)?;
        let feats = self.embed_all_train()?;
        let samples: Vec<LatentSample<'_>> = self
            .data
            .train
            .iter()
            .zip(&feats)
            .map(|(s, f)| LatentSample { image_id: s.id(), label: s.label, features: f })
            .collect();
        let result = project_prototypes(&mut self.model.prototypes, &samples)?;
        self.log.push(json!({
            "type": "projection",
            "epoch": epoch,
            "diversity_ok": result.diversity_ok,
            "entries": result.entries,
        }))?;
        self.end_stage(Stage::Projection, epoch, before)?;
        Ok(result)
    }

    pub fn run_last_layer(&mut self, epoch: usize) -> Result<()> {
        let before = self.begin_stage(Stage::LastLayer, epoch)?;
        let feats = self.embed_all_train()?;
        let objective = Objective::last_layer(&self.weights, &self.model.config);
        let lr = self.config.lr_last_layer;
        for it in 0..self.config.last_layer_iters {
            let order = self.order(epoch, Stage::LastLayer, it);
            for batch in order.chunks(self.config.batch_size) {
                let items: Vec<BatchItem<'_>> = batch
                    .iter()
                    .map(|&i| BatchItem {
                        id: self.data.train[i].id(),
                        features: &feats[i],
                        label: self.data.train[i].label,
                        mask: None,
                    })
                    .collect();
                let out = evaluate_objective(
                    &items,
                    &[],
                    &self.model.prototypes,
                    &self.model.head,
                    &self.model.config,
                    &objective,
                    true,
                )?;
                self.check_finite(&out.report, epoch)?;
                self.optim.head.update(self.model.head.weights_mut(), &out.grad_head, lr);
                self.step += 1;
                self.log_step(epoch, Stage::LastLayer, Some(it), &out.report, &[("head", lr)])?;
            }
        }
        self.end_stage(Stage::LastLayer, epoch, before)
    }

    fn check_finite(&mut self, report: &LossReport, epoch: usize) -> Result<()> {
        if report.total.is_finite() {
            return Ok(());
        }
        let last = self.last_checkpoint.as_ref().map(|p| p.display().to_string());
        self.log.push(json!({"type": "diverged", "epoch": epoch, "step": self.step, "last_checkpoint": last}))?;
        Err(Error::Diverged { epoch, step: self.step })
    }

    fn log_step(
        &mut self,
        epoch: usize,
        stage: Stage,
        iteration: Option<usize>,
        report: &LossReport,
        lrs: &[(&str, f64)],
    ) -> Result<()> {
        let mut rec = Map::new();
        rec.insert("type".into(), json!("step"));
        rec.insert("step".into(), json!(self.step));
        rec.insert("epoch".into(), json!(epoch));
        rec.insert("stage".into(), json!(stage));
        if let Some(it) = iteration {
            rec.insert("iteration".into(), json!(it));
        }
        for (name, v) in &report.terms {
            rec.insert(name.clone(), json!(v));
        }
        rec.insert("total".into(), json!(report.total));
        let lr: Map<String, Value> = lrs.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
        rec.insert("lr".into(), Value::Object(lr));
        self.log.push(Value::Object(rec))
    }

    fn cache_file(&self, trunk_hash: &str, image: &InputImage) -> Option<PathBuf> {
        let dir = self.cache_dir.as_ref()?;
        let mut h = Sha256::new();
        h.update(trunk_hash.as_bytes());
        h.update((image.side as u64).to_le_bytes());
        for v in &image.pixels {
            h.update(v.to_le_bytes());
        }
        Some(dir.join(format!("trunk-{:x}.f64", h.finalize())))
    }

    fn trunk_output(&self, trunk_hash: &str, image: &InputImage) -> Result<Vec<f64>> {
        let path = self.cache_file(trunk_hash, image);
        if let Some(p) = &path {
            if let Ok(bytes) = std::fs::read(p) {
                if bytes.len() % 8 == 0 {
                    return Ok(bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect());
                }
            }
        }
        let out = self.model.trunk_forward(image)?.output().to_vec();
        if let Some(p) = &path {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let bytes: Vec<u8> = out.iter().flat_map(|v| v.to_le_bytes()).collect();
            crate::data::valid_set::write_atomic(p, &bytes)?;
        }
        Ok(out)
    }

    /// The trunk is frozen during warm-up, so its outputs are computed once.
    fn fill_trunk_cache(&mut self) -> Result<()> {
        let hash = group_hashes(&self.model).remove("trunk").expect("trunk group");
        if self.trunk_cache.as_ref().is_some_and(|(h, _, _)| *h == hash) {
            return Ok(());
        }
        let train = self
            .data
            .train
            .iter()
            .map(|s| self.trunk_output(&hash, &s.image))
            .collect::<Result<Vec<_>>>()?;
        let valid = self
            .valid
            .images
            .iter()
            .map(|im| self.trunk_output(&hash, im))
            .collect::<Result<Vec<_>>>()?;
        self.trunk_cache = Some((hash, train, valid));
        Ok(())
    }

    fn embed_pass(&self, image: &InputImage, cached: Option<&Vec<f64>>) -> Result<EmbedPass> {
        match cached {
            Some(t) => {
                let (addon, features) = self.model.embed_from_trunk(t)?;
                Ok(EmbedPass { trunk: None, addon, features })
            }
            None => self.model.embed_for_training(image),
        }
    }

    fn embed_all_train(&self) -> Result<Vec<FeatureMap>> {
        self.data.train.iter().map(|s| self.model.embed(&s.image)).collect()
    }

    fn prototype_step(&mut self, batch: &[usize], epoch: usize, stage: Stage, lrs: &[(&str, f64)]) -> Result<()> {
        let warm = stage == Stage::Warmup;
        let cache = if warm { self.trunk_cache.as_ref() } else { None };
        let passes = batch
            .iter()
            .map(|&i| self.embed_pass(&self.data.train[i].image, cache.map(|c| &c.1[i])))
            .collect::<Result<Vec<_>>>()?;
        let uses_valid = self.config.mode == Mode::LpLr;
        let valid_passes = if uses_valid {
            self.valid
                .images
                .iter()
                .enumerate()
                .map(|(k, im)| self.embed_pass(im, cache.map(|c| &c.2[k])))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let valid: Vec<ValidPatch> = if uses_valid {
            self.valid
                .cells
                .iter()
                .map(|&(k, cell, class)| ValidPatch {
                    class_id: class,
                    vector: valid_passes[k].features.patch_at(cell).to_vec(),
                })
                .collect()
        } else {
            Vec::new()
        };
        let items: Vec<BatchItem<'_>> = batch
            .iter()
            .zip(&passes)
            .map(|(&i, p)| BatchItem {
                id: self.data.train[i].id(),
                features: &p.features,
                label: self.data.train[i].label,
                mask: self.plans[i].as_ref(),
            })
            .collect();
        let objective = Objective::for_mode(self.config.mode, &self.weights, &self.model.config);
        let out = evaluate_objective(
            &items,
            &valid,
            &self.model.prototypes,
            &self.model.head,
            &self.model.config,
            &objective,
            true,
        )?;
        drop(items);
        self.check_finite(&out.report, epoch)?;

        let mut g_addon = vec![0.0; self.model.addon.params().len()];
        let mut g_trunk = (!warm).then(|| vec![0.0; self.model.backbone.params().len()]);
        for (p, gz) in passes.iter().zip(&out.grad_features) {
            self.model.backward_features(p, gz, &mut g_addon, g_trunk.as_deref_mut());
        }
        if !valid.is_empty() {
            let width = self.model.config.latent_cells() * self.model.config.depth;
            let depth = self.model.config.depth;
            let mut gz = vec![vec![0.0; width]; valid_passes.len()];
            for (e, &(k, cell, _)) in self.valid.cells.iter().enumerate() {
                for d in 0..depth {
                    gz[k][cell * depth + d] += out.grad_valid[e][d];
                }
            }
            for (p, g) in valid_passes.iter().zip(&gz) {
                self.model.backward_features(p, g, &mut g_addon, g_trunk.as_deref_mut());
            }
        }

        for &(group, lr) in lrs {
            match group {
                "trunk" => {
                    let g = g_trunk.as_ref().expect("trunk gradient in joint stage");
                    self.optim.trunk.update(self.model.backbone.params_mut(), g, lr);
                }
                "addon" => self.optim.addon.update(self.model.addon.params_mut(), &g_addon, lr),
                "prototypes" => {
                    let depth = self.model.config.depth;
                    let mut flat: Vec<f64> =
                        self.model.prototypes.iter().flat_map(|p| p.vector.iter().copied()).collect();
                    self.optim.prototypes.update(&mut flat, &out.grad_prototypes, lr);
                    for (p, chunk) in self.model.prototypes.iter_mut().zip(flat.chunks_exact(depth)) {
                        p.vector.copy_from_slice(chunk);
                    }
                }
                other => unreachable!("no parameter group `{other}`"),
            }
        }
        self.step += 1;
        self.log_step(epoch, stage, None, &out.report, lrs)
    }

    /// Mean distance between each valid patch (embedded with the current
    /// model) and the prototypes of its class.
    pub fn valid_distance(&self) -> Result<f64> {
        let feats = self
            .valid
            .images
            .iter()
            .map(|im| self.model.embed(im))
            .collect::<Result<Vec<_>>>()?;
        let mut total = 0.0;
        for &(k, cell, class) in &self.valid.cells {
            let v = feats[k].patch_at(cell);
            let ds: Vec<f64> = self
                .model
                .prototypes
                .iter()
                .filter(|p| p.class_id == class)
                .map(|p| l2_distance(&p.vector, v))
                .collect();
            total += ds.iter().sum::<f64>() / ds.len().max(1) as f64;
        }
        Ok(total / self.valid.cells.len().max(1) as f64)
    }

    /// Logs epoch metrics and returns the model-selection score (validation
    /// BA, or training BA without a validation split).
    fn epoch_end(&mut self, epoch: usize) -> Result<f64> {
        if !self.valid.cells.is_empty() {
            let d = self.valid_distance()?;
            self.log.push(json!({"type": "valid_distance", "epoch": epoch, "when": "end", "mean": d}))?;
        }
        let (split, samples) = if self.data.val.is_empty() {
            ("train", &self.data.train)
        } else {
            ("val", &self.data.val)
        };
        let id = crate::checkpoint::model_digest(&self.model);
        let report = match eval::evaluate(&self.model, samples, &id, split) {
            Ok(r) => r,
            Err(e) if e.is_validation() => {
                self.log.push(json!({"type": "eval", "epoch": epoch, "split": split, "error": e.to_string()}))?;
                return Ok(f64::NAN);
            }
            Err(e) => return Err(e),
        };
        self.log.push(json!({
            "type": "eval",
            "epoch": epoch,
            "split": split,
            "ba": report.ba,
            "recall": report.recall,
        }))?;
        Ok(report.ba)
    }

    fn after_projection(&mut self, epoch: usize, score: f64) -> Result<()> {
        let ckpt = self.checkpoint(Some(epoch));
        if let Some(dir) = self.out_dir.clone() {
            let path = dir.join(format!("ckpt-epoch{epoch}.ppt"));
            ckpt.save(&path)?;
            self.last_checkpoint = Some(path);
            self.log.push(json!({"type": "checkpoint", "epoch": epoch, "file": format!("ckpt-epoch{epoch}.ppt")}))?;
        }
        let better = !score.is_nan() && self.best_score.is_none_or(|b| score > b);
        if better {
            self.best_score = Some(score);
            let mut best = ckpt;
            if let Some(r) = &mut best.resume {
                r.best_score = Some(score);
            }
            if let Some(dir) = &self.out_dir {
                best.save(&dir.join("best.ppt"))?;
            }
            self.best = Some(best);
            self.log.push(json!({"type": "best", "epoch": epoch, "score": score}))?;
        }
        Ok(())
    }

    pub fn source_table(&self) -> Vec<SourceRow> {
        let mc = &self.model.config;
        self.model
            .prototypes
            .iter()
            .enumerate()
            .filter_map(|(j, p)| {
                let s = p.source.as_ref()?;
                let path = self.data.train.iter().find(|t| t.id() == s.image_id).map(|t| t.path.clone());
                Some(SourceRow {
                    prototype: j,
                    class: p.class_id,
                    image_id: s.image_id.clone(),
                    image_path: path,
                    row: s.row,
                    col: s.col,
                    bbox: crate::model::cell_bbox(s.row, s.col, mc.latent_side, mc.input_side),
                })
            })
            .collect()
    }

    /// Snapshot with resume state for continuing at `self.next_epoch`.
    pub fn checkpoint(&self, epoch: Option<usize>) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.clone(), self.source_table());
        ck.epoch = epoch;
        ck.mode = Some(self.config.mode);
        ck.resume = Some(ResumeState {
            train: self.config.clone(),
            weights: self.weights.clone(),
            next_epoch: self.next_epoch,
            step: self.step,
            stage: self.stage,
            optim: self.optim.clone(),
            best_score: self.best_score,
        });
        ck
    }
}
