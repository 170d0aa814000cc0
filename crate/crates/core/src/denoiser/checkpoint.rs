//! Checkpoint directory layout:
//!
//! ```text
//! manifest.json        config, tensor list (name, shape, file), metadata
//! <tensor name>.f32    raw little-endian f32, row-major, one per tensor
//! ```
//!
//! Tensors are listed in [`TENSOR_NAMES`](super::TENSOR_NAMES) order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DenoiserConfig, DenoiserParams, TENSOR_NAMES};
use crate::error::{Error, Result};

const FORMAT: &str = "fpan-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    byte_order: String,
    config: DenoiserConfig,
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams<f32>,
    /// Free-form run information (policy, seed, hyperparameters).
    pub metadata: serde_json::Value,
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for ((name, data), shape) in TENSOR_NAMES
        .iter()
        .zip(ckpt.params.tensors())
        .zip(ckpt.params.tensor_shapes())
    {
        let file = format!("{name}.f32");
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape,
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: "float32".into(),
        byte_order: "little-endian".into(),
        config: ckpt.params.config,
        tensors,
        metadata: ckpt.metadata.clone(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let corrupt = |path: PathBuf, reason: String| Error::CorruptCheckpoint { path, reason };
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| corrupt(manifest_path.clone(), e.to_string()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(manifest_path.clone(), e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(corrupt(
            manifest_path,
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }

    let mut params = DenoiserParams::<f32>::zeros(manifest.config);
    let expected_shapes = params.tensor_shapes();
    if manifest.tensors.len() != TENSOR_NAMES.len() {
        return Err(corrupt(manifest_path, "wrong number of tensors".into()));
    }
    for (i, (entry, slot)) in manifest.tensors.iter().zip(params.tensors_mut()).enumerate() {
        if entry.name != TENSOR_NAMES[i] || entry.shape != expected_shapes[i] {
            return Err(corrupt(
                manifest_path.clone(),
                format!("tensor {} has unexpected name or shape", entry.name),
            ));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| corrupt(path.clone(), e.to_string()))?;
        if bytes.len() != slot.len() * 4 {
            return Err(corrupt(
                path,
                format!("expected {} bytes, found {}", slot.len() * 4, bytes.len()),
            ));
        }
        for (dst, chunk) in slot.iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    Ok(Checkpoint {
        params,
        metadata: manifest.metadata,
    })
}
