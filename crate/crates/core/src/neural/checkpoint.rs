//! Checkpoints: `manifest.json` lists `(name, shape, offset)` per tensor and
//! `params.bin` holds every value as a little-endian f32, concatenated in
//! manifest order. Offsets count elements, not bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{AceError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT: &str = "ace-params-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub total: usize,
    pub step_count: u64,
    pub tensors: Vec<ManifestEntry>,
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(store.params().len());
    let mut blob = Vec::with_capacity(store.num_params() * 4);
    let mut offset = 0;
    for p in store.params() {
        tensors.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset,
        });
        offset += p.len();
        for v in &p.value {
            blob.extend_from_slice(&(v.to_f32().unwrap_or(f32::NAN)).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: "f32-le".into(),
        total: offset,
        step_count: store.step_count,
        tensors,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

/// Loads values into an already constructed store, checking every tensor's
/// name and shape against the manifest.
pub fn load_checkpoint<T: Real>(store: &mut ParamStore<T>, dir: &Path) -> Result<()> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT {
        return Err(AceError::Format(format!(
            "unknown checkpoint format {}",
            manifest.format
        )));
    }
    let blob = fs::read(dir.join(BLOB_FILE))?;
    if blob.len() != manifest.total * 4 {
        return Err(AceError::Format(format!(
            "blob has {} bytes, manifest expects {}",
            blob.len(),
            manifest.total * 4
        )));
    }
    if manifest.tensors.len() != store.params().len() {
        return Err(AceError::StructureMismatch(format!(
            "checkpoint has {} tensors, model has {}",
            manifest.tensors.len(),
            store.params().len()
        )));
    }
    for (entry, p) in manifest.tensors.iter().zip(store.params_mut()) {
        if entry.name != p.name || entry.shape != p.shape {
            return Err(AceError::StructureMismatch(format!(
                "checkpoint tensor {}{:?} vs model {}{:?}",
                entry.name, entry.shape, p.name, p.shape
            )));
        }
        let bytes = &blob[entry.offset * 4..(entry.offset + p.len()) * 4];
        for (v, c) in p.value.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64);
        }
    }
    store.step_count = manifest.step_count;
    Ok(())
}
