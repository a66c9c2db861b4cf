//! Tensor serialization: a JSON manifest (name → shape → byte offset) beside
//! one little-endian `f32` blob.
//!
//! `model.json` pairs with `model.bin`. The manifest carries a free-form
//! `header` object and the SHA-256 of the blob, so a manifest/blob mismatch
//! is detected at load time.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

pub const FORMAT: &str = "vitdistill-tensors/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub blob: String,
    pub blob_sha256: String,
    pub header: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Blob path paired with a manifest path (`x.json` → `x.bin`).
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode(store: &ParamStore, header: serde_json::Value, blob_name: &str) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(store.num_elements() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for p in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset: blob.len(),
            decay: p.decay,
        });
        for v in p.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        blob: blob_name.to_string(),
        blob_sha256: sha256_hex(&blob),
        header,
        tensors,
    };
    (manifest, blob)
}

pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<ParamStore> {
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", manifest.format)));
    }
    if sha256_hex(blob) != manifest.blob_sha256 {
        return Err(Error::Checkpoint("blob does not match manifest checksum".into()));
    }
    let mut store = ParamStore::new();
    let mut expected_offset = 0;
    for e in &manifest.tensors {
        let n = numel(&e.shape);
        if e.offset != expected_offset || e.offset + 4 * n > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has offset {} (expected {}), blob is {} bytes",
                e.name,
                e.offset,
                expected_offset,
                blob.len()
            )));
        }
        let data = blob[e.offset..e.offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?, e.decay);
        expected_offset += 4 * n;
    }
    if expected_offset != blob.len() {
        return Err(Error::Checkpoint(format!(
            "blob has {} trailing bytes",
            blob.len() - expected_offset
        )));
    }
    Ok(store)
}

/// Writes `path` (manifest) and its sibling blob. Returns the manifest hash.
pub fn save(path: &Path, store: &ParamStore, header: serde_json::Value) -> Result<String> {
    let blob_file = blob_path(path);
    let blob_name = blob_file
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (manifest, blob) = encode(store, header, &blob_name);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(&blob_file, &blob).map_err(|e| Error::io(&blob_file, e))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(path, text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(text.as_bytes()))
}

pub fn load(path: &Path) -> Result<(Manifest, ParamStore)> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let blob_file = path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    let store = decode(&manifest, &blob)?;
    Ok((manifest, store))
}

/// Content hash of a saved checkpoint: SHA-256 of its manifest bytes, which
/// in turn pin the blob checksum.
pub fn file_hash(path: &Path) -> Result<String> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&text))
}
