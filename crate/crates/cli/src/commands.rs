use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use protopart_core::checkpoint::Checkpoint;
use protopart_core::data::synth::{write_synthetic, SynthConfig};
use protopart_core::data::{
    channel_stats, load_image, load_manifest, load_samples, Manifest, MaskPolarity, Sample, Split, ValidPrototypeSet,
};
use protopart_core::eval::{audit_prototypes, evaluate as eval_report, explain as explain_image, render_explanation, AuditImage};
use protopart_core::model::{InputImage, ProtoPartModel};
use protopart_core::review::SessionStore;
use protopart_core::trainer::{TrainData, Trainer, ValidImage};
use protopart_core::Error;

use crate::config::{Overrides, RunConfig, RESOLVED_CONFIG};
use crate::{AuditArgs, EvaluateArgs, ExplainArgs, Failure, ServeArgs, SynthArgs, TrainArgs};

type Outcome = Result<(), Failure>;

pub const CACHE_ENV: &str = "PROTOPART_CACHE";

/// Absolute path of an existing file or directory.
fn existing(path: &Path, flag: &str) -> Result<PathBuf, Failure> {
    path.canonicalize()
        .map_err(|e| Failure::Invalid(format!("{flag} {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<PathBuf, Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    existing(path, "--out")
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Outcome {
    let body = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    std::fs::write(path, body).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Points every manifest row at its mask inside `dir`: the manifest's own mask
/// file name if present there, else `<id>_mask.png`, else `<id>.png`.
/// Rows with no mask file get none.
fn redirect_masks(manifest: &mut Manifest, dir: Option<&Path>) {
    for row in &mut manifest.rows {
        let Some(dir) = dir else {
            row.mask = None;
            continue;
        };
        let mut candidates = Vec::new();
        if let Some(name) = row.mask.as_ref().and_then(|m| m.file_name()) {
            candidates.push(dir.join(name));
        }
        candidates.push(dir.join(format!("{}_mask.png", row.id)));
        candidates.push(dir.join(format!("{}.png", row.id)));
        row.mask = candidates.into_iter().find(|p| p.is_file());
    }
}

fn valid_images(set: &ValidPrototypeSet, manifest: &Manifest, side: usize) -> Result<Vec<ValidImage>, Failure> {
    let mut cache: BTreeMap<String, InputImage> = BTreeMap::new();
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for (i, e) in set.entries.iter().enumerate() {
        let Some(row) = manifest.find(&e.image) else {
            missing.push(format!("valid entry {i}: image `{}` is not in the manifest", e.image));
            continue;
        };
        if !cache.contains_key(&e.image) {
            cache.insert(e.image.clone(), load_image(&row.image, &row.id, side, Some(row.label))?);
        }
        out.push(ValidImage { entry: e.clone(), image: cache[&e.image].clone() });
    }
    if !missing.is_empty() {
        return Err(Error::Validation(missing).into());
    }
    Ok(out)
}

fn resolve(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(&existing(p, "--config")?)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        data: a.data.clone(),
        mode: a.mode,
        masks: a.masks.clone(),
        valid_set: a.valid_set.clone(),
        out: a.out.clone(),
        seed: a.seed,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr_features: a.lr_features,
        lambda3: a.lambda3,
        lambda4: a.lambda4,
        depth: a.depth,
        top_k: a.top_k,
        prototypes_per_class: a.prototypes_per_class,
        mask_polarity: a.mask_polarity,
    });
    cfg.validate()?;
    cfg.data = Some(existing(cfg.data.as_ref().unwrap(), "--data")?);
    if let Some(m) = &cfg.masks {
        cfg.masks = Some(existing(m, "--masks")?);
    }
    if let Some(v) = &cfg.valid_set {
        cfg.valid_set = Some(existing(v, "--valid-set")?);
    }
    cfg.out = Some(create_dir(cfg.out.as_ref().unwrap())?);
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> Outcome {
    let mut cfg = resolve(&a)?;
    let side = cfg.model.input_side;
    let mut manifest = load_manifest(cfg.data.as_ref().unwrap(), cfg.model.num_classes)?;
    for w in &manifest.warnings {
        log::warn!("{w}");
    }
    redirect_masks(&mut manifest, cfg.masks.as_deref());
    let samples = load_samples(&manifest, side, cfg.mask_polarity, Some(&[Split::Train, Split::Val]))?;
    let (train, val): (Vec<Sample>, Vec<Sample>) = samples.into_iter().partition(|s| s.split == Split::Train);
    if !cfg.pixel_stats_fixed {
        let (mean, std) = channel_stats(train.iter().map(|s| &s.image));
        cfg.model.pixel_mean = mean;
        cfg.model.pixel_std = std;
        cfg.pixel_stats_fixed = true;
    }
    let valid = match &cfg.valid_set {
        Some(p) => valid_images(&ValidPrototypeSet::read(p, cfg.model.num_classes, side)?, &manifest, side)?,
        None => Vec::new(),
    };
    let out = cfg.out.clone().unwrap();
    let data = TrainData { train, val, valid };
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(Checkpoint::load(&existing(p, "--resume")?)?, data)?,
        None => {
            write_json(&out.join(RESOLVED_CONFIG), &cfg)?;
            let model = ProtoPartModel::init(cfg.model.clone())?;
            Trainer::new(model, cfg.train.clone(), cfg.weights.clone(), data)?
        }
    };
    let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    trainer = trainer.with_output(&out)?.with_cache_dir(cache);
    trainer.train()?;
    match trainer.best_score {
        Some(s) => println!("done: {} (best validation BA {s:.2})", out.display()),
        None => println!("done: {}", out.display()),
    }
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Outcome {
    let ckpt = Checkpoint::load(&existing(&a.ckpt, "--ckpt")?)?;
    let data = existing(&a.data, "--data")?;
    let cfg = &ckpt.model.config;
    let mut manifest = load_manifest(&data, cfg.num_classes)?;
    redirect_masks(&mut manifest, None);
    let split: Option<Split> = match &a.split {
        Some(s) => Some(s.parse().map_err(Failure::Invalid)?),
        None => None,
    };
    let splits = split.map(|s| vec![s]);
    let samples = load_samples(&manifest, cfg.input_side, MaskPolarity::default(), splits.as_deref())?;
    let tag = match split {
        Some(s) => format!("{}:{s}", data.display()),
        None => data.display().to_string(),
    };
    let report = eval_report(&ckpt.model, &samples, &ckpt.id, &tag)?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

pub fn explain(a: ExplainArgs) -> Outcome {
    let ckpt = Checkpoint::load(&existing(&a.ckpt, "--ckpt")?)?;
    let path = existing(&a.image, "--image")?;
    let side = ckpt.model.config.input_side;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let image = load_image(&path, &id, side, None)?;
    let expl = explain_image(&ckpt.model, &ckpt.sources, &image, a.top)?;
    for e in &expl.entries {
        println!(
            "prototype {:>3} class {} score {:.4} weight {:+.4} points {:+.4} at {:?}",
            e.prototype, e.class, e.score, e.weight, e.points, e.location
        );
    }
    println!("predicted class {} (logits {:?})", expl.predicted, expl.logits);
    if let Some(out) = &a.out {
        write_json(out, &expl)?;
    }
    if let Some(render) = &a.render {
        let mut sources = BTreeMap::new();
        for s in &ckpt.sources {
            if let Some(p) = &s.image_path {
                if p.is_file() && !sources.contains_key(&s.image_id) {
                    sources.insert(s.image_id.clone(), load_image(p, &s.image_id, side, None)?);
                }
            }
        }
        let panel = render_explanation(&ckpt.model, &image, &expl, &sources)?;
        panel.save(render).map_err(|e| Failure::Runtime(format!("{}: {e}", render.display())))?;
    }
    Ok(())
}

pub fn audit(a: AuditArgs) -> Outcome {
    let ckpt = Checkpoint::load(&existing(&a.ckpt, "--ckpt")?)?;
    let cfg = &ckpt.model.config;
    let mut manifest = load_manifest(&existing(&a.data, "--data")?, cfg.num_classes)?;
    if let Some(dir) = &a.masks {
        redirect_masks(&mut manifest, Some(&existing(dir, "--masks")?));
    }
    let wanted: Vec<&str> = ckpt.model.prototypes.iter().filter_map(|p| p.source.as_ref()).map(|s| s.image_id.as_str()).collect();
    manifest.rows.retain(|r| wanted.contains(&r.id.as_str()));
    let samples = load_samples(&manifest, cfg.input_side, a.mask_polarity, None)?;
    let images: BTreeMap<String, AuditImage<'_>> = samples
        .iter()
        .map(|s| (s.id().to_string(), AuditImage { image: &s.image, mask: s.mask.as_ref() }))
        .collect();
    let report = audit_prototypes(&ckpt.model, &images, a.band)?;
    for e in &report.entries {
        println!(
            "prototype {:>3} class {} image {:<12} {:?}{}",
            e.prototype,
            e.class,
            e.image.as_deref().unwrap_or("-"),
            e.status,
            e.reason.as_deref().map(|r| format!(" ({r})")).unwrap_or_default()
        );
    }
    match report.fraction {
        Some(f) => println!("inside-lesion fraction {f:.4}"),
        None => println!("inside-lesion fraction undefined (no auditable prototypes)"),
    }
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> Outcome {
    let ckpt_path = existing(&a.ckpt, "--ckpt")?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let dir = match &a.run_dir {
        Some(d) => d.clone(),
        None => ckpt_path.parent().unwrap_or(Path::new(".")).join("review"),
    };
    let store = SessionStore::open(ckpt, &dir)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| Failure::Invalid(format!("--host/--port: {e}")))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("session {} on http://{addr}", dir.display());
    rt.block_on(protopart_review::serve(store, addr, a.allow_partial))
        .map_err(|e| Failure::Runtime(format!("serve on {addr}: {e}")))
}

pub fn synth(a: SynthArgs) -> Outcome {
    let cfg = SynthConfig {
        n_per_class: a.n,
        seed: a.seed,
        side: a.side,
        confound_fraction: a.confound,
        ..SynthConfig::default()
    };
    let out = write_synthetic(&cfg, &a.out)?;
    println!("{} images, manifest {}", out.rows.len(), out.manifest.display());
    Ok(())
}
