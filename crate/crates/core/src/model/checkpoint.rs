//! Checkpoint files: a JSON manifest next to a blob of little-endian `f64`
//! values laid out in [`ModelParams::tensors`] order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{init_params, ModelDims, ModelError, ModelParams};

pub const CHECKPOINT_FORMAT_VERSION: &str = "1";

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub strategy: String,
    pub stage: String,
    pub epoch: usize,
    pub alternation: usize,
    pub optimizer_steps: u64,
    pub validation_mr_at_100: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: String,
    pub dims: ModelDims,
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
    /// File name of the blob, relative to the manifest.
    pub blob: String,
    /// Hex SHA-256 of the blob.
    pub sha256: String,
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>.bin` with the extension replaced.
pub fn save_checkpoint(
    params: &ModelParams,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), ModelError> {
    let views = params.tensors();
    let mut blob = Vec::new();
    for view in &views {
        for v in view.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let blob_file = blob_path(path);
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION.to_string(),
        dims: params.dims,
        meta: meta.clone(),
        tensors: views
            .iter()
            .map(|v| TensorEntry {
                name: v.name.clone(),
                len: v.data.len(),
            })
            .collect(),
        blob: blob_file
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string(),
        sha256: hex::encode(Sha256::digest(&blob)),
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&blob_file, &blob)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads a checkpoint, verifying format version, tensor layout and checksum.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointManifest), ModelError> {
    let manifest: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    let blob_file = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let blob = std::fs::read(&blob_file)?;
    let digest = hex::encode(Sha256::digest(&blob));
    if digest != manifest.sha256 {
        return Err(ModelError::Checkpoint(format!(
            "checksum mismatch for {}",
            blob_file.display()
        )));
    }
    let mut params = init_params(manifest.dims, 0)?;
    {
        let expected: Vec<(String, usize)> = params
            .tensors()
            .iter()
            .map(|v| (v.name.clone(), v.data.len()))
            .collect();
        let got: Vec<(String, usize)> = manifest
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.len))
            .collect();
        if expected != got {
            return Err(ModelError::Checkpoint(
                "tensor layout does not match the declared dimensions".into(),
            ));
        }
        let total: usize = expected.iter().map(|(_, n)| n).sum();
        if blob.len() != total * 8 {
            return Err(ModelError::Checkpoint(format!(
                "blob holds {} bytes, expected {}",
                blob.len(),
                total * 8
            )));
        }
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for (_, _, data) in params.tensors_mut() {
        for slot in data.iter_mut() {
            *slot = values.next().expect("length checked");
        }
    }
    Ok((params, manifest))
}

/// Checks that a checkpoint's dimensions match the expected ones.
pub fn check_dims(manifest: &CheckpointManifest, expected: &ModelDims) -> Result<(), ModelError> {
    if &manifest.dims != expected {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint dims {:?} differ from configured {:?}",
            manifest.dims, expected
        )));
    }
    Ok(())
}
