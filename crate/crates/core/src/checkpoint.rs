//! Checkpoint files (`*.ppt`): one JSON document holding the model, the
//! prototype source table and, optionally, the state needed to resume training.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::valid_set::write_atomic;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Mode};
use crate::model::{Backbone, ProtoPartModel};
use crate::trainer::{Optimizers, Stage, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "protopart-v1";

/// Where a projected prototype came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRow {
    pub prototype: usize,
    pub class: usize,
    pub image_id: String,
    pub image_path: Option<PathBuf>,
    pub row: usize,
    pub col: usize,
    /// `[x, y, w, h]` in input pixels.
    pub bbox: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub next_epoch: usize,
    pub step: u64,
    pub stage: Stage,
    pub optim: Optimizers,
    pub best_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub id: String,
    pub epoch: Option<usize>,
    pub mode: Option<Mode>,
    pub model: ProtoPartModel,
    #[serde(default)]
    pub sources: Vec<SourceRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<ResumeState>,
}

/// Short content hash of all model parameters.
pub fn model_digest(model: &ProtoPartModel) -> String {
    let mut h = Sha256::new();
    for group in [model.backbone.params(), model.addon.params(), model.head.weights()] {
        for v in group {
            h.update(v.to_le_bytes());
        }
    }
    for p in &model.prototypes {
        h.update((p.class_id as u64).to_le_bytes());
        for v in &p.vector {
            h.update(v.to_le_bytes());
        }
    }
    let hex = format!("{:x}", h.finalize());
    hex[..16].to_string()
}

impl Checkpoint {
    pub fn new(model: ProtoPartModel, sources: Vec<SourceRow>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            id: model_digest(&model),
            epoch: None,
            mode: None,
            model,
            sources,
            resume: None,
        }
    }

    /// True once every prototype has a recorded source patch.
    pub fn is_projected(&self) -> bool {
        let m = self.model.prototypes.len();
        m > 0 && self.sources.len() == m && self.model.prototypes.iter().all(|p| p.source.is_some())
    }

    pub fn source(&self, prototype: usize) -> Option<&SourceRow> {
        self.sources.iter().find(|s| s.prototype == prototype)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_vec(self)?;
        write_atomic(path, &body)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let head: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(vec![format!("{}: not a checkpoint: {e}", path.display())]))?;
        match head.get("format").and_then(|f| f.as_str()) {
            Some(CHECKPOINT_FORMAT) => {}
            other => {
                return Err(Error::Validation(vec![format!(
                    "{}: unsupported checkpoint format {other:?}, expected {CHECKPOINT_FORMAT}",
                    path.display()
                )]))
            }
        }
        let ckpt: Checkpoint = serde_json::from_value(head)
            .map_err(|e| Error::Validation(vec![format!("{}: malformed checkpoint: {e}", path.display())]))?;
        ckpt.model.validate()?;
        Ok(ckpt)
    }
}
