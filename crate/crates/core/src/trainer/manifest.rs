//! JSON Lines dataset manifests.

use std::collections::BTreeSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One frame/audio pair. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub frame_path: PathBuf,
    pub audio_path: PathBuf,
    pub center_time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_ref: Option<PathBuf>,
    /// Class label, when known. Negatives never share it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate manifest id {:?}", r.id)));
            }
            if !r.center_time_s.is_finite() || r.center_time_s < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "record {:?} has center time {}",
                    r.id, r.center_time_s
                )));
            }
        }
        Ok(Self {
            root: root.into(),
            records,
        })
    }

    /// Parses a manifest and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for (n, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
                Error::InvalidArgument(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            records.push(rec);
        }
        let m = Self::new(root, records)?;
        m.check_files()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn check_files(&self) -> Result<()> {
        for r in &self.records {
            let mut paths = vec![&r.frame_path, &r.audio_path];
            paths.extend(r.annotation_ref.as_ref());
            for p in paths {
                let full = self.resolve(p);
                if !full.exists() {
                    return Err(Error::MissingFile(full));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Same records with every annotation reference dropped.
    pub fn without_annotations(&self) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| ManifestRecord {
                annotation_ref: None,
                ..r.clone()
            })
            .collect();
        Self {
            root: self.root.clone(),
            records,
        }
    }

    /// Keeps annotation references only on the first `n` annotated records.
    pub fn limit_annotations(&self, n: usize) -> Self {
        let mut kept = 0;
        let records = self
            .records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if r.annotation_ref.is_some() {
                    if kept < n {
                        kept += 1;
                    } else {
                        r.annotation_ref = None;
                    }
                }
                r
            })
            .collect();
        Self {
            root: self.root.clone(),
            records,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            frame_path: "f.png".into(),
            audio_path: "a.wav".into(),
            center_time_s: 0.5,
            annotation_ref: None,
            label: None,
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        assert!(DatasetManifest::new("", vec![rec("a"), rec("a")]).is_err());
        assert!(DatasetManifest::new("", vec![rec("a"), rec("b")]).is_ok());
    }

    #[test]
    fn missing_files_fail_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(dir.path(), vec![rec("a")]).unwrap();
        let path = dir.path().join("m.jsonl");
        m.save(&path).unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(Error::MissingFile(_))));
        std::fs::write(dir.path().join("f.png"), b"").unwrap();
        std::fs::write(dir.path().join("a.wav"), b"").unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.records, m.records);
    }
}
