//! Checkpoint files: a JSON manifest next to one raw little-endian blob.
//!
//! ```json
//! {"format":"sslab-checkpoint","version":1,"blob":"ckpt.bin","meta":{...},
//!  "tensors":[{"name":"w","shape":[2,3],"dtype":"f64","offset":0,"length":48}]}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::Params;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT: &str = "sslab-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub blob: String,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint<S: Scalar = f64> {
    pub tensors: Params<S>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

/// Blob path paired with a manifest path (`x.json` → `x.bin`).
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(tensors: Params<S>) -> Self {
        Self { tensors, meta: BTreeMap::new() }
    }

    pub fn save(&self, manifest_path: &Path) -> Result<(), CheckpointError> {
        let blob = blob_path(manifest_path);
        let mut bytes = Vec::with_capacity(self.tensors.numel() * S::BYTES);
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in self.tensors.iter() {
            let offset = bytes.len() as u64;
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: S::DTYPE.to_string(),
                offset,
                length: bytes.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            version: VERSION,
            blob: blob
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| CheckpointError::Format("manifest path has no file name".into()))?,
            meta: self.meta.clone(),
            tensors: entries,
        };
        if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(&blob, &bytes).map_err(io_err(&blob))?;
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(manifest_path, json).map_err(io_err(manifest_path))?;
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let blob = manifest_path.with_file_name(&manifest.blob);
        let bytes = fs::read(&blob).map_err(io_err(&blob))?;
        let mut tensors = Params::new();
        for e in &manifest.tensors {
            if e.dtype != S::DTYPE {
                return Err(CheckpointError::Format(format!(
                    "tensor {} has dtype {}, expected {}",
                    e.name,
                    e.dtype,
                    S::DTYPE
                )));
            }
            let numel: usize = e.shape.iter().product();
            if e.length as usize != numel * S::BYTES {
                return Err(CheckpointError::Format(format!("tensor {} length does not match shape", e.name)));
            }
            let start = e.offset as usize;
            let end = start
                .checked_add(e.length as usize)
                .filter(|&end| end <= bytes.len())
                .ok_or_else(|| CheckpointError::Format(format!("tensor {} extends past blob end", e.name)))?;
            let data = bytes[start..end].chunks_exact(S::BYTES).map(S::read_le).collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::Format(err.to_string()))?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(CheckpointError::Format(format!("duplicate tensor {}", e.name)));
            }
        }
        Ok(Self { tensors, meta: manifest.meta })
    }
}
