use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{read_embedding_header, read_embeddings};
use super::EmbeddingSequence;
use crate::error::{shape_err, Error, Result};
use crate::io::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "source" => Ok(Role::Source),
            "target" => Ok(Role::Target),
            other => Err(format!("unknown role {other:?} (expected source | target)")),
        }
    }
}

/// One line of a manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub subject: String,
    pub label: usize,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub frames: usize,
    pub role: Role,
}

/// A JSON Lines list of videos.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestSummary {
    pub dim: usize,
    pub n_classes: usize,
    pub videos: usize,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        let mut offset = 0u64;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let len = line.len() as u64 + 1;
            if !line.trim().is_empty() {
                let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    offset,
                    message: format!("bad manifest record: {e}"),
                })?;
                records.push(rec);
            }
            offset += len;
        }
        Ok(Self {
            name: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            base_dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            records,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn resolve(&self, rec: &ManifestRecord) -> PathBuf {
        if rec.path.is_absolute() {
            rec.path.clone()
        } else {
            self.base_dir.join(&rec.path)
        }
    }

    /// Subjects in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.subject.clone()))
            .map(|r| r.subject.clone())
            .collect()
    }

    /// Check every referenced file against its record and against a common dimension.
    pub fn validate(&self, expected_dim: Option<usize>) -> Result<ManifestSummary> {
        if self.records.is_empty() {
            return Err(Error::Protocol(format!("manifest {} is empty", self.name)));
        }
        check_roles(&self.records)?;
        let mut dim = expected_dim;
        let mut n_classes = 0;
        for rec in &self.records {
            let path = self.resolve(rec);
            let (rows, cols) = read_embedding_header(&path)?;
            if rows != rec.frames {
                return Err(shape_err!(
                    "{}: manifest declares {} frames, file holds {rows}",
                    path.display(),
                    rec.frames
                ));
            }
            match dim {
                Some(d) if d != cols => return Err(shape_err!("{}: dimension {cols}, expected {d}", path.display())),
                _ => dim = Some(cols),
            }
            n_classes = n_classes.max(rec.label + 1);
        }
        Ok(ManifestSummary {
            dim: dim.unwrap(),
            n_classes,
            videos: self.records.len(),
        })
    }

    /// Read every video, in manifest order.
    pub fn load_videos(&self) -> Result<Vec<EmbeddingSequence>> {
        self.records
            .iter()
            .map(|rec| {
                let path = self.resolve(rec);
                let frames = read_embeddings(&path)?;
                if frames.rows() != rec.frames {
                    return Err(shape_err!(
                        "{}: manifest declares {} frames, file holds {}",
                        path.display(),
                        rec.frames,
                        frames.rows()
                    ));
                }
                EmbeddingSequence::new(rec.subject.clone(), rec.label, frames)
            })
            .collect()
    }
}

fn check_roles(records: &[ManifestRecord]) -> Result<()> {
    let mut roles: BTreeMap<&str, Role> = BTreeMap::new();
    for r in records {
        if let Some(prev) = roles.insert(&r.subject, r.role) {
            if prev != r.role {
                return Err(Error::Protocol(format!(
                    "subject {} is tagged both {prev:?} and {:?}",
                    r.subject, r.role
                )));
            }
        }
    }
    Ok(())
}

/// Records whose subject carries `role`, in original order.
pub fn split_subjects(manifest: &Manifest, role: Role) -> Result<Manifest> {
    check_roles(&manifest.records)?;
    Ok(Manifest {
        name: format!(
            "{}-{}",
            manifest.name,
            serde_json::to_value(role).unwrap().as_str().unwrap()
        ),
        base_dir: manifest.base_dir.clone(),
        records: manifest.records.iter().filter(|r| r.role == role).cloned().collect(),
    })
}
