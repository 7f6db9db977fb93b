//! Minimal f64 deep-learning engine: tensors, a reverse-mode tape, 2D/3D
//! (transposed) convolutions, normalisation layers, Adam and checkpoints.

pub mod graph;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod tensor;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use graph::{Grads, Graph, PadMode, Var};
pub use params::{Adam, Init, ParamStore};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Hex SHA-256 of a serialisable value's canonical JSON.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("serialisable config");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// JSON half of a checkpoint. The parameter blob sits next to it with a
/// `.bin` extension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub architecture: serde_json::Value,
    pub architecture_hash: String,
    #[serde(default)]
    pub working_spacing_mm: Option<[f64; 3]>,
    pub iterations: u64,
    /// Networks in blob order with their parameter shapes.
    pub networks: Vec<NetworkEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub name: String,
    pub params: Vec<(String, Vec<usize>)>,
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_checkpoint(path: &Path, manifest: &CheckpointManifest, stores: &[&ParamStore]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut blob = Vec::new();
    for s in stores {
        blob.extend(s.to_blob());
    }
    fs::write(path, serde_json::to_vec_pretty(manifest)?).map_err(|e| Error::io(path, e))?;
    let bp = blob_path(path);
    fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Fill freshly built stores from the blob written by [`save_checkpoint`].
pub fn load_blob_into(path: &Path, stores: &mut [&mut ParamStore]) -> Result<()> {
    let bp = blob_path(path);
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let mut offset = 0;
    for s in stores.iter_mut() {
        let n: usize = s.entries().iter().map(|e| e.value.len() * 8).sum();
        if offset + n > blob.len() {
            return Err(Error::Checkpoint("parameter blob too short".into()));
        }
        s.load_blob(&blob[offset..offset + n])?;
        offset += n;
    }
    if offset != blob.len() {
        return Err(Error::Checkpoint("parameter blob has trailing bytes".into()));
    }
    Ok(())
}
