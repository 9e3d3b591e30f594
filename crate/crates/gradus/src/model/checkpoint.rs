//! Checkpoint format: one line of JSON (format version, config, head
//! specs, parameter directory) followed by raw little-endian f32 blobs at
//! the offsets the directory declares. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{expected_param_shapes, GptConfig, GptModel, HeadSpec};
use crate::tensor::optim::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint header is not valid JSON: {0}")]
    Parse(String),
    #[error("checkpoint format version {found} (expected {CHECKPOINT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("parameter `{0}` missing from checkpoint")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter `{0}` not part of this model family")]
    UnknownParam(String),
    #[error("parameter `{0}` blob exceeds the file")]
    BlobOutOfBounds(String),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: GptConfig,
    head_specs: Vec<HeadSpec>,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: u64,
    /// Blob length in bytes.
    len: u64,
}

pub fn save_checkpoint(model: &GptModel<f32>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut entries = Vec::with_capacity(model.params().len());
    let mut blobs: Vec<u8> = Vec::new();
    for (name, tensor) in model.params() {
        let offset = blobs.len() as u64;
        for &v in tensor.data() {
            blobs.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ParamEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
            len: blobs.len() as u64 - offset,
        });
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        head_specs: model.heads().to_vec(),
        params: entries,
    };
    let mut file = fs::File::create(path)?;
    let json = serde_json::to_string(&header).map_err(|e| CheckpointError::Parse(e.to_string()))?;
    file.write_all(json.as_bytes())?;
    file.write_all(b"\n")?;
    file.write_all(&blobs)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<GptModel<f32>, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Invalid("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| CheckpointError::Parse(e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: header.format_version,
        });
    }
    header
        .config
        .validate()
        .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    let blobs = &bytes[newline + 1..];

    let expected: BTreeMap<String, Vec<usize>> =
        expected_param_shapes(&header.config, &header.head_specs)
            .into_iter()
            .collect();
    let mut params = ParamSet::new();
    for entry in &header.params {
        let expected_shape = expected
            .get(&entry.name)
            .ok_or_else(|| CheckpointError::UnknownParam(entry.name.clone()))?;
        if &entry.shape != expected_shape {
            return Err(CheckpointError::ShapeMismatch {
                name: entry.name.clone(),
                expected: expected_shape.clone(),
                found: entry.shape.clone(),
            });
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + entry.len as usize;
        if entry.len as usize != n * 4 || end > blobs.len() {
            return Err(CheckpointError::BlobOutOfBounds(entry.name.clone()));
        }
        let data: Vec<f32> = blobs[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(entry.name.clone(), Tensor::param(entry.shape.clone(), data));
    }
    for name in expected.keys() {
        if !params.contains_key(name) {
            return Err(CheckpointError::MissingParam(name.clone()));
        }
    }
    Ok(GptModel::from_parts(header.config, header.head_specs, params))
}
