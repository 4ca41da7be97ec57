use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NV: usize = 0;
pub const MEL: usize = 1;

pub fn class_name(class: usize) -> String {
    match class {
        NV => "NV".to_string(),
        MEL => "MEL".to_string(),
        other => format!("class{other}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "" | "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// File stem of the image path; unique within a manifest.
    pub id: String,
    pub image: PathBuf,
    pub label: usize,
    pub mask: Option<PathBuf>,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawRow {
    image: String,
    label: String,
    #[serde(default)]
    mask: Option<String>,
    #[serde(default)]
    split: Option<String>,
}

fn parse_label(raw: &str, num_classes: usize) -> std::result::Result<usize, String> {
    let t = raw.trim();
    let label = match t.to_ascii_uppercase().as_str() {
        "MEL" => MEL,
        "NV" => NV,
        _ => t.parse::<usize>().map_err(|_| format!("label `{t}` is not a class index"))?,
    };
    if label >= num_classes {
        return Err(format!("label {label} outside 0..{num_classes}"));
    }
    Ok(label)
}

/// Loads `image,label,mask[,split]`. Relative paths resolve against the
/// manifest's directory. All problems are collected into one report.
pub fn load_manifest(path: &Path, num_classes: usize) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    for col in ["image", "label"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Validation(vec![format!(
                "{}: header must contain `{col}` (expected image,label,mask)",
                path.display()
            )]));
        }
    }

    let mut rows = Vec::new();
    let mut problems = Vec::new();
    let mut ids: BTreeMap<String, usize> = BTreeMap::new();
    for (i, rec) in reader.deserialize::<RawRow>().enumerate() {
        let line = i + 2;
        let raw = match rec {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("row {line}: {e}"));
                continue;
            }
        };
        let image = root.join(&raw.image);
        let id = Path::new(&raw.image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if id.is_empty() {
            problems.push(format!("row {line}: empty image path"));
            continue;
        }
        if !image.is_file() {
            problems.push(format!("row {line}: image `{}` not found", image.display()));
        }
        let label = match parse_label(&raw.label, num_classes) {
            Ok(l) => l,
            Err(e) => {
                problems.push(format!("row {line}: {e}"));
                continue;
            }
        };
        let mask = raw.mask.filter(|m| !m.trim().is_empty()).map(|m| root.join(m));
        if let Some(m) = &mask {
            if !m.is_file() {
                problems.push(format!("row {line}: mask `{}` not found", m.display()));
            }
        }
        let split = match raw.split.as_deref().unwrap_or("").parse::<Split>() {
            Ok(s) => s,
            Err(e) => {
                problems.push(format!("row {line}: {e}"));
                continue;
            }
        };
        if let Some(prev) = ids.insert(id.clone(), line) {
            problems.push(format!("row {line}: image id `{id}` duplicates row {prev}"));
        }
        rows.push(ManifestRow { id, image, label, mask, split });
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let mut warnings = Vec::new();
    if rows.is_empty() {
        let w = format!("{}: manifest has no rows", path.display());
        log::warn!("{w}");
        warnings.push(w);
    }
    Ok(Manifest { rows, warnings })
}

/// Writes rows with paths relative to the manifest directory where possible.
pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let root = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| -> String {
        p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    };
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image", "label", "mask", "split"])?;
    for r in rows {
        let mask = r.mask.as_deref().map(rel).unwrap_or_default();
        w.write_record([rel(&r.image), r.label.to_string(), mask, r.split.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn find(&self, id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.id == id)
    }

    pub fn class_counts(&self, split: Option<Split>, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for r in self.rows.iter().filter(|r| split.is_none_or(|s| r.split == s)) {
            counts[r.label] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, name: &str) {
        std::fs::write(dir.join(name), b"x").unwrap();
    }

    #[test]
    fn header_only_is_empty_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "image,label,mask\n").unwrap();
        let m = load_manifest(&p, 2).unwrap();
        assert!(m.rows.is_empty());
        assert_eq!(m.warnings.len(), 1);
    }

    #[test]
    fn out_of_range_label_names_row() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "image,label,mask\na.png,2,\n").unwrap();
        let err = load_manifest(&p, 2).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn itemizes_every_problem() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "image,label,mask\na.png,1,missing.png\nb.png,0,\na.png,0,\n").unwrap();
        match load_manifest(&p, 2).unwrap_err() {
            Error::Validation(items) => {
                assert_eq!(items.len(), 3, "{items:?}");
                assert!(items[0].contains("mask"));
                assert!(items[1].contains("b.png"));
                assert!(items[2].contains("duplicates"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn named_labels_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        touch(dir.path(), "b.png");
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "image,label,mask,split\na.png,MEL,,val\nb.png,nv,,\n").unwrap();
        let m = load_manifest(&p, 2).unwrap();
        assert_eq!(m.rows[0].label, MEL);
        assert_eq!(m.rows[0].split, Split::Val);
        assert_eq!(m.rows[1].label, NV);
        assert_eq!(m.rows[1].split, Split::Train);
    }

    #[test]
    fn write_then_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        touch(dir.path(), "am.png");
        let rows = vec![ManifestRow {
            id: "a".into(),
            image: dir.path().join("a.png"),
            label: 1,
            mask: Some(dir.path().join("am.png")),
            split: Split::Test,
        }];
        let p = dir.path().join("m.csv");
        write_manifest(&p, &rows).unwrap();
        assert_eq!(load_manifest(&p, 2).unwrap().rows, rows);
    }

    #[test]
    fn ten_row_fixture() {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/manifest10/manifest.csv");
        let m = load_manifest(&p, 2).unwrap();
        assert_eq!(m.rows.len(), 10);
        let labels: Vec<usize> = m.rows.iter().map(|r| r.label).collect();
        assert_eq!(labels, vec![1, 1, 0, 1, 0, 1, 1, 1, 0, 1]);
        let masked: Vec<&str> = m.rows.iter().filter(|r| r.mask.is_some()).map(|r| r.id.as_str()).collect();
        assert_eq!(masked, vec!["img0", "img2", "img4", "img6", "img8"]);
        assert_eq!(m.rows[4].split, Split::Val);
        assert_eq!(m.rows[5].split, Split::Test);
        assert_eq!(m.class_counts(None, 2), vec![3, 7]);
    }
}
