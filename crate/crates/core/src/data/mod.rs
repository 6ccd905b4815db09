//! Embedding sequences, prompt sets, manifests and the synthetic corpus generator.

pub mod format;
mod manifest;
mod synth;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{domain_err, shape_err, Error, Result};
use crate::io::{read_json, write_json};

pub use format::{read_embeddings, write_embeddings};
pub use manifest::{split_subjects, Manifest, ManifestRecord, ManifestSummary, Role};
pub use synth::{
    synth_generate, GroundTruth, SubjectTruth, SynthCorpus, SynthSpec, SynthVideo, CLASS_PROMPTS_STEM, DIRECTIONS_FILE,
    GROUND_TRUTH_FILE, MANIFEST_FILE, PROMPTS_STEM, SPEC_FILE,
};

/// One video as a T×d matrix of frame embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub subject: String,
    pub label: usize,
    pub frames: Tensor,
}

impl EmbeddingSequence {
    pub fn new(subject: impl Into<String>, label: usize, frames: Tensor) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(shape_err!("frames must be T×d, got {:?}", frames.shape()));
        }
        Ok(Self {
            subject: subject.into(),
            label,
            frames,
        })
    }

    /// Frame count `T`.
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Build a sequence from raw frame rows; an empty list is an error.
pub fn sequence_from_rows(subject: &str, label: usize, rows: &[Vec<f64>]) -> Result<EmbeddingSequence> {
    if rows.is_empty() {
        return Err(domain_err!("empty sequence for subject {subject}"));
    }
    EmbeddingSequence::new(subject, label, Tensor::from_rows(rows)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptKind {
    #[default]
    Au,
    ClassPromptEnsemble,
}

/// Named prompt embeddings, one row per prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    names: Vec<String>,
    embeddings: Tensor,
    kind: PromptKind,
}

#[derive(Debug, Serialize, Deserialize)]
struct PromptSidecar {
    kind: PromptKind,
    names: Vec<String>,
    embeddings: PathBuf,
}

impl PromptSet {
    pub fn new(names: Vec<String>, embeddings: Tensor, kind: PromptKind) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.rows() != names.len() {
            return Err(shape_err!(
                "{} prompt names for an embedding matrix of shape {:?}",
                names.len(),
                embeddings.shape()
            ));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::Config(format!("duplicate prompt name {dup:?}")));
        }
        for (i, name) in names.iter().enumerate() {
            if embeddings.row(i).iter().all(|&v| v == 0.0) {
                return Err(domain_err!("prompt {name:?} has a zero embedding"));
            }
        }
        Ok(Self {
            names,
            embeddings,
            kind,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn kind(&self) -> PromptKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// Load from a JSON sidecar that names the `AUE1` matrix next to it.
    pub fn load(sidecar: &Path) -> Result<Self> {
        let meta: PromptSidecar = read_json(sidecar)?;
        let dir = sidecar.parent().unwrap_or(Path::new("."));
        let embeddings = read_embeddings(&dir.join(&meta.embeddings))?;
        Self::new(meta.names, embeddings, meta.kind)
    }

    /// Write `<stem>.aue` and `<stem>.json` into `dir`; returns the sidecar path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let matrix = PathBuf::from(format!("{stem}.aue"));
        write_embeddings(&self.embeddings, &dir.join(&matrix))?;
        let sidecar = dir.join(format!("{stem}.json"));
        write_json(
            &sidecar,
            &PromptSidecar {
                kind: self.kind,
                names: self.names.clone(),
                embeddings: matrix,
            },
        )?;
        Ok(sidecar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sequence_is_rejected() {
        assert!(matches!(sequence_from_rows("s", 0, &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn prompt_set_invariants() {
        let m = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let ok = PromptSet::new(vec!["a".into(), "b".into()], m.clone(), PromptKind::Au);
        assert!(ok.is_ok());
        let dup = PromptSet::new(vec!["a".into(), "a".into()], m, PromptKind::Au);
        assert!(dup.is_err());
        let zero = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let err = PromptSet::new(vec!["a".into(), "brow".into()], zero, PromptKind::Au).unwrap_err();
        assert!(err.to_string().contains("brow"), "{err}");
    }

    #[test]
    fn prompt_set_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let m = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.25, 0.0, -0.125]).unwrap();
        let set = PromptSet::new(vec!["x".into(), "y".into()], m, PromptKind::ClassPromptEnsemble).unwrap();
        let sidecar = set.save(dir.path(), "cp").unwrap();
        assert_eq!(PromptSet::load(&sidecar).unwrap(), set);
    }
}
