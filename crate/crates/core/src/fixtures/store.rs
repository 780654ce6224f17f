//! Directory of named float32 tensors described by `manifest.json`.
//!
//! Each tensor is one headerless little-endian `f32` blob. The manifest
//! records its name, dtype, shape, file name and SHA-256 digest, plus a
//! free-form `meta` object owned by the caller.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_TAG: &str = "ovseg-tensors";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_f32_le(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn blob_name(name: &str) -> String {
    format!("{name}.bin")
}

/// Writes `tensors` (in the given order) and the manifest into `dir`,
/// creating it if needed.
pub fn write_tensor_dir(dir: &Path, meta: serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(Error::InvalidArgument(format!("bad tensor name {name:?}")));
        }
        let bytes = encode_f32_le(t);
        let file = blob_name(name);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        meta,
        tensors: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if m.format != FORMAT_TAG || m.version != FORMAT_VERSION {
        return Err(Error::InvalidData(format!(
            "{}: unsupported format {:?} v{}",
            path.display(),
            m.format,
            m.version
        )));
    }
    Ok(m)
}

/// Reads and verifies every tensor of a manifest.
pub fn read_tensor_dir(dir: &Path) -> Result<(serde_json::Value, BTreeMap<String, Tensor>)> {
    let manifest = read_manifest(dir)?;
    let mut out = BTreeMap::new();
    for entry in &manifest.tensors {
        let path = dir.join(&entry.file);
        if !path.is_file() {
            return Err(Error::MissingTensor {
                name: entry.name.clone(),
                path,
            });
        }
        if entry.dtype != "f32" {
            return Err(Error::InvalidData(format!(
                "tensor {} has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let numel: usize = entry.shape.iter().product();
        if bytes.len() != numel * 4 {
            return Err(Error::Shape(format!(
                "tensor {} declares shape {:?} ({} bytes) but its blob has {} bytes",
                entry.name,
                entry.shape,
                numel * 4,
                bytes.len()
            )));
        }
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::InvalidData(format!(
                "tensor {} fails its sha256 check",
                entry.name
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if out
            .insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data)?)
            .is_some()
        {
            return Err(Error::InvalidData(format!("tensor {} listed twice", entry.name)));
        }
    }
    Ok((manifest.meta, out))
}

/// Removes a named tensor from a loaded map, failing with `MissingTensor`.
pub fn take(tensors: &mut BTreeMap<String, Tensor>, name: &str, dir: &Path) -> Result<Tensor> {
    tensors.remove(name).ok_or_else(|| Error::MissingTensor {
        name: name.to_string(),
        path: dir.join(MANIFEST_FILE),
    })
}
