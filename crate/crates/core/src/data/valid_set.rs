//! The user-validated prototype store (`valid_set.json`, schema version 1).

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VALID_SET_VERSION: u32 = 1;
pub const DEFAULT_VALID_PER_CLASS: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidEntry {
    pub class: usize,
    pub image: String,
    /// `[x, y, w, h]` in input pixels.
    pub bbox: [usize; 4],
    #[serde(default)]
    pub note: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnail: Option<PathBuf>,
}

impl ValidEntry {
    pub fn center(&self) -> (f64, f64) {
        let [x, y, w, h] = self.bbox;
        (y as f64 + h as f64 / 2.0, x as f64 + w as f64 / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidPrototypeSet {
    pub version: u32,
    pub entries: Vec<ValidEntry>,
}

impl Default for ValidPrototypeSet {
    fn default() -> Self {
        Self { version: VALID_SET_VERSION, entries: Vec::new() }
    }
}

impl ValidPrototypeSet {
    pub fn new(entries: Vec<ValidEntry>) -> Self {
        Self { version: VALID_SET_VERSION, entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for e in &self.entries {
            if let Some(c) = counts.get_mut(e.class) {
                *c += 1;
            }
        }
        counts
    }

    /// Checks the version, class range and that every bbox is non-empty and
    /// inside a `side`×`side` image.
    pub fn validate(&self, num_classes: usize, side: usize) -> Result<()> {
        let mut p = Vec::new();
        if self.version != VALID_SET_VERSION {
            p.push(format!("unsupported valid-set version {}", self.version));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.class >= num_classes {
                p.push(format!("entry {i}: class {} outside 0..{num_classes}", e.class));
            }
            if e.image.is_empty() {
                p.push(format!("entry {i}: empty image id"));
            }
            let [x, y, w, h] = e.bbox;
            if w == 0 || h == 0 {
                p.push(format!("entry {i}: empty bbox {:?}", e.bbox));
            } else if x + w > side || y + h > side {
                p.push(format!("entry {i}: bbox {:?} exceeds {side}x{side}", e.bbox));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    pub fn read(path: &Path, num_classes: usize, side: usize) -> Result<Self> {
        let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
        f.lock_shared().map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        f.read_to_string(&mut text).map_err(|e| Error::io(path, e))?;
        let set: ValidPrototypeSet = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(vec![format!("{}: malformed valid set: {e}", path.display())]))?;
        set.validate(num_classes, side)?;
        Ok(set)
    }

    /// Writes under an exclusive advisory lock on `<path>.lock`, through a
    /// temp file and rename.
    pub fn write(&self, path: &Path, num_classes: usize, side: usize) -> Result<()> {
        self.validate(num_classes, side)?;
        let lock_path = lock_path(path);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| Error::io(&lock_path, e))?;
        lock.lock().map_err(|e| Error::io(&lock_path, e))?;
        let mut body = serde_json::to_vec_pretty(self)?;
        body.push(b'\n');
        write_atomic(path, &body)?;
        lock.unlock().map_err(|e| Error::io(&lock_path, e))?;
        Ok(())
    }
}

fn lock_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".lock");
    path.with_file_name(name)
}

/// Writes `bytes` to a sibling temp file, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
