//! Review sessions: per-prototype verdicts on a projected checkpoint, kept as
//! an append-only event log plus an atomically rewritten current-state file.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, SourceRow};
use crate::data::manifest::class_name;
use crate::data::valid_set::{write_atomic, ValidEntry, ValidPrototypeSet};
use crate::data::load_image;
use crate::error::{Error, Result};
use crate::render;

pub const SESSION_FILE: &str = "session.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const EXPORT_FILE: &str = "valid_set.json";
pub const PATCH_THUMB_SIDE: u32 = 96;

pub const HINTS: [&str; 2] = [
    "Keep prototypes that sit inside the skin lesion or on its border.",
    "Discard prototypes that activate on artifacts: black borders, image corners, rulers, hair.",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    #[default]
    Pending,
    Valid,
    Discard,
}

impl std::str::FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Verdict::Valid),
            "discard" => Ok(Verdict::Discard),
            "pending" => Ok(Verdict::Pending),
            other => Err(Error::Validation(vec![format!(
                "verdict must be \"valid\" or \"discard\", got {other:?}"
            )])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub id: usize,
    pub class: usize,
    pub image: String,
    pub bbox: [usize; 4],
    pub verdict: Verdict,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub checkpoint: String,
    pub created_at: u64,
    pub roster: Vec<RosterEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictEvent {
    pub seq: u64,
    pub at: u64,
    pub prototype: usize,
    pub verdict: Verdict,
    pub note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassProgress {
    pub valid: usize,
    pub discard: usize,
    pub pending: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportOutcome {
    pub path: PathBuf,
    pub set: ValidPrototypeSet,
    pub per_class: Vec<usize>,
    pub warnings: Vec<String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// A session bound to one checkpoint, persisted under `dir`.
pub struct SessionStore {
    dir: PathBuf,
    checkpoint: Checkpoint,
    session: ReviewSession,
    next_seq: u64,
}

impl SessionStore {
    /// Opens the session for `checkpoint` in `dir`, creating it if absent.
    /// A session file for a different checkpoint is an error.
    pub fn open(checkpoint: Checkpoint, dir: &Path) -> Result<Self> {
        if !checkpoint.is_projected() {
            return Err(Error::Validation(vec![format!(
                "checkpoint {} has no prototype source table; review needs a checkpoint saved after a projection epoch",
                checkpoint.id
            )]));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SESSION_FILE);
        let session = if path.is_file() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let s: ReviewSession = serde_json::from_str(&text)?;
            if s.checkpoint != checkpoint.id {
                return Err(Error::Conflict(format!(
                    "{} belongs to checkpoint {}, not {}; use a new session directory",
                    path.display(),
                    s.checkpoint,
                    checkpoint.id
                )));
            }
            s
        } else {
            let roster = checkpoint
                .sources
                .iter()
                .map(|s| RosterEntry {
                    id: s.prototype,
                    class: s.class,
                    image: s.image_id.clone(),
                    bbox: s.bbox,
                    verdict: Verdict::Pending,
                    note: String::new(),
                })
                .collect();
            let s = ReviewSession { checkpoint: checkpoint.id.clone(), created_at: now(), roster };
            write_atomic(&path, &serde_json::to_vec_pretty(&s)?)?;
            s
        };
        let events = dir.join(EVENTS_FILE);
        let next_seq = match std::fs::read_to_string(&events) {
            Ok(t) => t.lines().filter(|l| !l.trim().is_empty()).count() as u64,
            Err(_) => 0,
        };
        Ok(Self { dir: dir.to_path_buf(), checkpoint, session, next_seq })
    }

    pub fn session(&self) -> &ReviewSession {
        &self.session
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry(&self, id: usize) -> Result<&RosterEntry> {
        self.session
            .roster
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::NotFound(format!("prototype {id}")))
    }

    fn source(&self, id: usize) -> Result<&SourceRow> {
        self.checkpoint.source(id).ok_or_else(|| Error::NotFound(format!("prototype {id}")))
    }

    pub fn progress(&self) -> Vec<ClassProgress> {
        let mut out = vec![ClassProgress::default(); self.checkpoint.model.config.num_classes];
        for e in &self.session.roster {
            let p = &mut out[e.class];
            match e.verdict {
                Verdict::Valid => p.valid += 1,
                Verdict::Discard => p.discard += 1,
                Verdict::Pending => p.pending += 1,
            }
        }
        out
    }

    pub fn pending(&self) -> usize {
        self.session.roster.iter().filter(|e| e.verdict == Verdict::Pending).count()
    }

    /// Records a verdict: event first, then the current-state file.
    pub fn set_verdict(&mut self, id: usize, verdict: Verdict, note: &str) -> Result<RosterEntry> {
        if verdict == Verdict::Pending {
            return Err(Error::Validation(vec!["verdict must be \"valid\" or \"discard\"".into()]));
        }
        let idx = self
            .session
            .roster
            .iter()
            .position(|e| e.id == id)
            .ok_or_else(|| Error::NotFound(format!("prototype {id}")))?;
        let event = VerdictEvent { seq: self.next_seq, at: now(), prototype: id, verdict, note: note.to_string() };
        let events = self.dir.join(EVENTS_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&events)
            .map_err(|e| Error::io(&events, e))?;
        let mut line = serde_json::to_vec(&event)?;
        line.push(b'\n');
        f.write_all(&line).map_err(|e| Error::io(&events, e))?;
        f.sync_all().map_err(|e| Error::io(&events, e))?;
        self.next_seq += 1;

        let entry = &mut self.session.roster[idx];
        entry.verdict = verdict;
        entry.note = note.to_string();
        let entry = entry.clone();
        write_atomic(&self.dir.join(SESSION_FILE), &serde_json::to_vec_pretty(&self.session)?)?;
        Ok(entry)
    }

    pub fn events(&self) -> Result<Vec<VerdictEvent>> {
        let path = self.dir.join(EVENTS_FILE);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&path, e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }

    /// The valid set implied by the current verdicts, with per-class warnings.
    pub fn valid_set(&self) -> (ValidPrototypeSet, Vec<usize>, Vec<String>) {
        let k = self.checkpoint.model.config.num_classes;
        let entries: Vec<ValidEntry> = self
            .session
            .roster
            .iter()
            .filter(|e| e.verdict == Verdict::Valid)
            .map(|e| ValidEntry {
                class: e.class,
                image: e.image.clone(),
                bbox: e.bbox,
                note: e.note.clone(),
                thumbnail: None,
            })
            .collect();
        let set = ValidPrototypeSet::new(entries);
        let per_class = set.class_counts(k);
        let warnings = per_class
            .iter()
            .enumerate()
            .filter(|(_, n)| **n == 0)
            .map(|(c, _)| {
                format!("class {} has no valid prototypes; the remembering term is vacuous for it", class_name(c))
            })
            .collect();
        (set, per_class, warnings)
    }

    /// Writes `valid_set.json` into the session directory.
    pub fn export(&self, allow_partial: bool) -> Result<ExportOutcome> {
        let pending = self.pending();
        if pending > 0 && !allow_partial {
            return Err(Error::Conflict(format!(
                "{pending} prototypes still pending; review them or export with allow_partial"
            )));
        }
        let (set, per_class, warnings) = self.valid_set();
        let cfg = &self.checkpoint.model.config;
        let path = self.dir.join(EXPORT_FILE);
        set.write(&path, cfg.num_classes, cfg.input_side)?;
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(ExportOutcome { path, set, per_class, warnings })
    }

    fn source_image(&self, id: usize) -> Result<(crate::model::InputImage, [usize; 4])> {
        let src = self.source(id)?;
        let path = src.image_path.as_ref().ok_or_else(|| {
            Error::MissingInput(format!("checkpoint records no image path for prototype {id}"))
        })?;
        let img = load_image(path, &src.image_id, self.checkpoint.model.config.input_side, None)?;
        Ok((img, src.bbox))
    }

    pub fn patch_png(&self, id: usize) -> Result<Vec<u8>> {
        let (img, bbox) = self.source_image(id)?;
        encode_png(&render::patch_thumbnail(&img, bbox, PATCH_THUMB_SIDE))
    }

    pub fn context_png(&self, id: usize) -> Result<Vec<u8>> {
        let (img, bbox) = self.source_image(id)?;
        encode_png(&render::context_thumbnail(&img, bbox))
    }
}

pub fn encode_png(img: &image::RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::image("<png buffer>", e))?;
    Ok(buf.into_inner())
}
