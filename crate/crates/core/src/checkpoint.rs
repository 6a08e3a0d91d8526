//! Tensor checkpoints: a JSON manifest next to a little-endian `f32` blob.

use std::fs;
use std::path::{Path, PathBuf};

use numkernel::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CxsError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Write `<stem>.json` and `<stem>.bin`; returns the manifest path.
pub fn save_checkpoint(manifest_path: &Path, kind: &str, meta: serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<PathBuf> {
    let blob = blob_path(manifest_path);
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        blob: blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| CxsError::Checkpoint(format!("bad checkpoint path {}", manifest_path.display())))?
            .to_string(),
        meta,
        tensors: entries,
    };
    fs::write(&blob, &bytes)?;
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest_path.to_path_buf())
}

pub fn load_checkpoint(manifest_path: &Path, expected_kind: &str) -> Result<(CheckpointManifest, Vec<(String, Tensor)>)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.kind != expected_kind {
        return Err(CxsError::Checkpoint(format!(
            "{} holds a {} checkpoint, expected {expected_kind}",
            manifest_path.display(),
            manifest.kind
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let bytes = fs::read(dir.join(&manifest.blob))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(CxsError::Checkpoint(format!("tensor {} has dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        let raw = bytes
            .get(e.offset..end)
            .ok_or_else(|| CxsError::Checkpoint(format!("tensor {} runs past the blob", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((manifest, out))
}

/// Round every value to the nearest `f32`, matching what a checkpoint stores.
pub fn quantize(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}
