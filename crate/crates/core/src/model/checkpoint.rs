//! Checkpoint container.
//!
//! ```text
//! 0..4     magic "AUCK"
//! 4..8     version, u32 LE (= 1)
//! 8..12    header length H, u32 LE
//! 12..12+H JSON header: model config, prompt kind and names, tensor names and shapes
//! ...      every tensor as f64 LE, in header order
//! ```
//!
//! Tensors are stored at full precision, so a write/read cycle is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::data::{PromptKind, PromptSet};
use crate::diffcore::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"AUCK";
pub const VERSION: u32 = 1;

const RAW_PROMPTS: &str = "prompts.raw";
const ADAPTED_PROMPTS: &str = "prompts.adapted";

/// Trained parameters together with the prompts they were trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub prompts: PromptSet,
    /// Adapter output for `prompts`, the starting point of test-time tuning.
    pub adapted: Tensor,
}

impl Checkpoint {
    /// Bundle `params` with `prompts`, computing the adapted prompt matrix.
    pub fn new(params: ModelParams, prompts: PromptSet) -> Result<Self> {
        let adapted = super::adapt_prompt_embeddings(prompts.embeddings(), params.adapter())?;
        if prompts.len() != params.n_prompts() {
            return Err(shape_err!(
                "{} prompts for a classifier expecting {}",
                prompts.len(),
                params.n_prompts()
            ));
        }
        Ok(Self {
            params,
            prompts,
            adapted,
        })
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.params.bit_eq(&other.params)
            && self.prompts.names() == other.prompts.names()
            && self.prompts.kind() == other.prompts.kind()
            && self.prompts.embeddings().bit_eq(other.prompts.embeddings())
            && self.adapted.bit_eq(&other.adapted)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    prompt_kind: PromptKind,
    prompt_names: Vec<String>,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut tensors: Vec<(&str, &Tensor)> = ck.params.tensor_names().into_iter().zip(ck.params.tensors()).collect();
    tensors.push((RAW_PROMPTS, ck.prompts.embeddings()));
    tensors.push((ADAPTED_PROMPTS, &ck.adapted));
    let header = Header {
        config: *ck.params.config(),
        prompt_kind: ck.prompts.kind(),
        prompt_names: ck.prompts.names().to_vec(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: (*name).to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck))
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 12 {
        return Err(format_err(
            path,
            bytes.len(),
            "file shorter than the checkpoint preamble",
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(path, 0, "bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(path, 4, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = 12 + hlen;
    if bytes.len() < body {
        return Err(format_err(path, bytes.len(), "header truncated"));
    }
    let header: Header =
        serde_json::from_slice(&bytes[12..body]).map_err(|e| format_err(path, 12, format!("bad header: {e}")))?;

    let mut offset = body;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + 8 * n;
        if bytes.len() < end {
            return Err(format_err(
                path,
                bytes.len(),
                format!("tensor {} truncated", entry.name),
            ));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| format_err(path, offset, format!("tensor {}: {e}", entry.name)))?;
        tensors.push(t);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(format_err(path, offset, "trailing bytes after last tensor"));
    }
    let names: Vec<&str> = header.tensors.iter().map(|e| e.name.as_str()).collect();
    if names.len() < 2 || names[names.len() - 2..] != [RAW_PROMPTS, ADAPTED_PROMPTS] {
        return Err(format_err(path, 12, "header does not end with the prompt matrices"));
    }
    let adapted = tensors.pop().unwrap();
    let raw = tensors.pop().unwrap();
    let params = ModelParams::from_tensors(&header.config, tensors)?;
    if params.tensor_names() != names[..names.len() - 2] {
        return Err(format_err(path, 12, "parameter tensor names do not match the config"));
    }
    let prompts = PromptSet::new(header.prompt_names, raw, header.prompt_kind)?;
    if adapted.shape() != prompts.embeddings().shape() {
        return Err(shape_err!(
            "adapted prompts {:?} vs raw prompts {:?}",
            adapted.shape(),
            prompts.embeddings().shape()
        ));
    }
    Ok(Checkpoint {
        params,
        prompts,
        adapted,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::super::ClassifierKind;
    use super::*;

    fn checkpoint(kind: ClassifierKind) -> Checkpoint {
        let params = ModelParams::init(ModelConfig::new(4, 3, 2).with_classifier(kind), 5).unwrap();
        let raw = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 - 5.5) / 3.0).collect()).unwrap();
        let prompts = PromptSet::new(vec!["a".into(), "b".into(), "c".into()], raw, PromptKind::Au).unwrap();
        Checkpoint::new(params, prompts).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in [ClassifierKind::Mlp, ClassifierKind::LinearHead] {
            let ck = checkpoint(kind);
            let bytes = encode_checkpoint(&ck);
            let back = decode_checkpoint(&bytes, Path::new("ck")).unwrap();
            assert!(back.bit_eq(&ck));
            assert_eq!(encode_checkpoint(&back), bytes);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&checkpoint(ClassifierKind::Mlp));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], Path::new("ck")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad, Path::new("ck")),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
