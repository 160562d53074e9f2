//! Checkpoint archive: a JSON manifest naming parameters and shapes plus a
//! binary blob of row-major little-endian f64 values in manifest order.
//! Save → load → save round-trips bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub fn manifest_path(dir: &Path, stem: &str) -> std::path::PathBuf {
    dir.join(format!("{}.manifest.json", stem))
}

pub fn blob_path(dir: &Path, stem: &str) -> std::path::PathBuf {
    dir.join(format!("{}.params.bin", stem))
}

pub fn save(dir: &Path, stem: &str, entries: &[(String, &Tensor)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        entries: entries
            .iter()
            .map(|(name, t)| ManifestEntry { name: name.clone(), shape: t.shape.clone() })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path(dir, stem), json)?;

    let mut blob = Vec::new();
    for (_, t) in entries {
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(blob_path(dir, stem), blob)?;
    Ok(())
}

/// Load a checkpoint into an existing parameter registry. Names and shapes
/// must match the manifest exactly, in order.
pub fn load_into(dir: &Path, stem: &str, entries: &mut [(String, &mut Tensor)]) -> Result<()> {
    let json = fs::read_to_string(manifest_path(dir, stem))?;
    let manifest: Manifest = serde_json::from_str(&json)?;
    if manifest.entries.len() != entries.len() {
        return Err(Error::Checkpoint(format!(
            "manifest has {} entries, model has {}",
            manifest.entries.len(),
            entries.len()
        )));
    }
    let blob = fs::read(blob_path(dir, stem))?;
    let mut offset = 0usize;
    for (entry, (name, tensor)) in manifest.entries.iter().zip(entries.iter_mut()) {
        if &entry.name != name {
            return Err(Error::Checkpoint(format!(
                "manifest entry '{}' does not match model parameter '{}'",
                entry.name, name
            )));
        }
        if entry.shape != tensor.shape {
            return Err(Error::Checkpoint(format!(
                "parameter '{}': manifest shape {:?} vs model shape {:?}",
                name, entry.shape, tensor.shape
            )));
        }
        let n = tensor.data.len();
        let need = n * 8;
        if offset + need > blob.len() {
            return Err(Error::Checkpoint("blob shorter than manifest implies".to_string()));
        }
        for (i, chunk) in blob[offset..offset + need].chunks_exact(8).enumerate() {
            tensor.data[i] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        offset += need;
    }
    if offset != blob.len() {
        return Err(Error::Checkpoint("blob longer than manifest implies".to_string()));
    }
    Ok(())
}
