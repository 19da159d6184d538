//! Checkpoint persistence.
//!
//! A checkpoint is a directory: `manifest.json` plus one raw
//! little-endian f32 binary file per tensor (row-major). The manifest
//! carries the full model config and a sha256 digest per tensor file, so
//! corruption is detected before anything loads.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const CKPT_SCHEMA: &str = "ckpt.v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub byte_length: u64,
    pub digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, TensorEntry>,
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Write parameters (as f32) and the manifest into `dir`.
pub fn save_checkpoint(params: &ModelParams, config: &ModelConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tensors = BTreeMap::new();
    for (name, entry) in params.iter() {
        let mut bytes = Vec::with_capacity(entry.tensor.numel() * 4);
        for v in entry.tensor.data() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let file = format!("{name}.bin");
        let mut f = std::fs::File::create(dir.join(&file))?;
        f.write_all(&bytes)?;
        tensors.insert(
            name.clone(),
            TensorEntry {
                shape: entry.tensor.shape().to_vec(),
                dtype: "f32".to_string(),
                file,
                byte_length: bytes.len() as u64,
                digest: hex_digest(&bytes),
            },
        );
    }
    let manifest = Manifest {
        schema: CKPT_SCHEMA.to_string(),
        config: config.clone(),
        tensors,
    };
    let mut f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Load a checkpoint; digests and shapes are verified before any tensor
/// is accepted, so a bad file can never yield a partial model.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, ModelConfig)> {
    let manifest: Manifest =
        serde_json::from_reader(std::fs::File::open(dir.join("manifest.json"))?)?;
    if manifest.schema != CKPT_SCHEMA {
        return Err(Error::Checkpoint(format!(
            "unknown schema '{}' (expected {CKPT_SCHEMA})",
            manifest.schema
        )));
    }
    manifest.config.validate()?;
    let mut loaded: Vec<(String, Tensor)> = Vec::new();
    for (name, entry) in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}': unsupported dtype '{}'",
                entry.dtype
            )));
        }
        let bytes = std::fs::read(dir.join(&entry.file))?;
        if bytes.len() as u64 != entry.byte_length {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}': file is {} bytes, manifest says {}",
                bytes.len(),
                entry.byte_length
            )));
        }
        let digest = hex_digest(&bytes);
        if digest != entry.digest {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}': digest mismatch (corrupt file)"
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if numel * 4 != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}': shape {:?} disagrees with {} bytes",
                entry.shape,
                bytes.len()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in bytes.chunks_exact(4) {
            data.push(f64::from(f32::from_le_bytes([
                chunk[0], chunk[1], chunk[2], chunk[3],
            ])));
        }
        loaded.push((name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    let mut params = ModelParams::empty();
    for (name, tensor) in loaded {
        params.insert(&name, tensor);
    }
    Ok((params, manifest.config))
}
