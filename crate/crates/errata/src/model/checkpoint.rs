//! Checkpoint file format.
//!
//! Layout: a little-endian u32 header length, a JSON header
//! `{format_version, config, vocabulary, tensors}`, then raw little-endian
//! f32 tensor blobs in directory order. The vocabulary table makes a
//! checkpoint self-describing about its output alphabet; offsets are
//! relative to the start of the blob region.

use super::{ModelConfig, ModelError, ModelParameters};
use crate::tensor::Scalar;
use crate::tokens::vocabulary_table_json;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    vocabulary: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Serialize parameters (any precision) as an f32 checkpoint.
pub fn save<S: Scalar>(path: &Path, params: &ModelParameters<S>) -> Result<(), ModelError> {
    let mut tensors = Vec::with_capacity(params.set.len());
    let mut offset = 0u64;
    for id in params.set.ids() {
        let (rows, cols) = params.set.shape(id);
        tensors.push(TensorEntry { name: params.set.name(id).to_string(), rows, cols, offset });
        offset += (rows * cols * 4) as u64;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: params.config,
        vocabulary: vocabulary_table_json(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| ModelError::Checkpoint(format!("header serialization: {e}")))?;

    let mut out = Vec::with_capacity(4 + header_bytes.len() + offset as usize);
    out.extend((header_bytes.len() as u32).to_le_bytes());
    out.extend(&header_bytes);
    for id in params.set.ids() {
        for &x in params.set.data(id) {
            out.extend((x.to_f64() as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load an f32 checkpoint. The model is rebuilt from the stored config and
/// every registered tensor must be present with its expected shape.
pub fn load(path: &Path) -> Result<ModelParameters<f32>, ModelError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 {
        return Err(ModelError::Checkpoint("file too short".into()));
    }
    let header_len = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if bytes.len() < 4 + header_len {
        return Err(ModelError::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[4..4 + header_len])
        .map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let blobs = &bytes[4 + header_len..];

    let mut params = ModelParameters::<f32>::init(header.config)?;
    if header.tensors.len() != params.set.len() {
        return Err(ModelError::Checkpoint(format!(
            "tensor directory has {} entries, model needs {}",
            header.tensors.len(),
            params.set.len()
        )));
    }
    for entry in &header.tensors {
        let id = params.set.lookup(&entry.name).ok_or_else(|| {
            ModelError::Checkpoint(format!("unknown tensor {} in directory", entry.name))
        })?;
        let (rows, cols) = params.set.shape(id);
        if (rows, cols) != (entry.rows, entry.cols) {
            return Err(ModelError::Checkpoint(format!(
                "tensor {} has shape {}x{}, expected {rows}x{cols}",
                entry.name, entry.rows, entry.cols
            )));
        }
        let n = rows * cols * 4;
        let start = entry.offset as usize;
        if start + n > blobs.len() {
            return Err(ModelError::Checkpoint(format!("tensor {} blob out of range", entry.name)));
        }
        let dst = params.set.data_mut(id);
        for (i, chunk) in blobs[start..start + n].chunks_exact(4).enumerate() {
            dst[i] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    params.validate_finite()?;
    Ok(params)
}
