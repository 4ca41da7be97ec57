//! Run configuration: a JSON file merged with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use protopart_core::data::MaskPolarity;
use protopart_core::losses::{LossWeights, Mode};
use protopart_core::model::ModelConfig;
use protopart_core::trainer::TrainConfig;
use protopart_core::{Error, Result};

pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub data: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub valid_set: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mask_polarity: MaskPolarity,
    /// When false, `model.pixel_mean/std` are recomputed from the training split.
    pub pixel_stats_fixed: bool,
}

/// Flag values that win over the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub masks: Option<PathBuf>,
    pub valid_set: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr_features: Option<f64>,
    pub lambda3: Option<f64>,
    pub lambda4: Option<f64>,
    pub depth: Option<usize>,
    pub top_k: Option<usize>,
    pub prototypes_per_class: Option<usize>,
    pub mask_polarity: Option<MaskPolarity>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Validation(vec![format!("{}: {e}", path.display())]))
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = &$src {
                    $dst = v.clone();
                }
            };
        }
        if o.data.is_some() {
            self.data = o.data.clone();
        }
        if o.masks.is_some() {
            self.masks = o.masks.clone();
        }
        if o.valid_set.is_some() {
            self.valid_set = o.valid_set.clone();
        }
        if o.out.is_some() {
            self.out = o.out.clone();
        }
        set!(o.mode, self.train.mode);
        if let Some(n) = o.epochs {
            // a shorter run keeps only the projections that still fit
            self.train.epochs = n;
            let dropped: Vec<usize> = self.train.projection_epochs.iter().copied().filter(|&e| e >= n).collect();
            if !dropped.is_empty() {
                log::info!("--epochs {n}: dropping projection epochs {dropped:?}");
                self.train.projection_epochs.retain(|&e| e < n);
            }
        }
        set!(o.batch_size, self.train.batch_size);
        set!(o.lr_features, self.train.lr_features);
        set!(o.lambda3, self.weights.lambda3);
        set!(o.lambda4, self.weights.lambda4);
        set!(o.depth, self.model.depth);
        set!(o.top_k, self.model.top_k);
        set!(o.prototypes_per_class, self.model.prototypes_per_class);
        set!(o.mask_polarity, self.mask_polarity);
        if let Some(s) = o.seed {
            self.train.seed = s;
            self.model.init_seed = s;
        }
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.data.is_none() {
            p.push("missing input: --data manifest.csv".to_string());
        }
        if self.out.is_none() {
            p.push("missing input: --out RUNDIR".to_string());
        }
        if self.train.mode == Mode::LpLm && self.masks.is_none() {
            p.push("missing input: mode lp+lm needs lesion masks (--masks DIR)".to_string());
        }
        if self.train.mode == Mode::LpLr && self.valid_set.is_none() {
            p.push("missing input: mode lp+lr needs a valid set (--valid-set valid_set.json)".to_string());
        }
        for check in [self.train.validate(), self.model.validate(), self.weights.validate(&self.model)] {
            if let Err(e) = check {
                match e {
                    Error::Validation(v) => p.extend(v),
                    other => p.push(other.to_string()),
                }
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }
}
