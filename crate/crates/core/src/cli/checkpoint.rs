//! Binary checkpoint container.
//!
//! ```text
//! b"ZSCK" | u32 format version | u64 header length | header JSON | tensor data
//! ```
//!
//! The header lists every tensor's name and shape in file order; the data
//! section is their elements as 64-bit little-endian floats, row-major.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameters;

pub const MAGIC: &[u8; 4] = b"ZSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub artifact_version: String,
    pub module: String,
    pub config_hash: String,
    pub seed: u64,
    /// Module-specific construction data (class lists, dimensions).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<ArrayD<f64>>,
}

impl Checkpoint {
    /// Snapshot of every parameter of `model`.
    pub fn from_model<M: Parameters>(
        model: &M,
        module: &str,
        config_hash: &str,
        seed: u64,
        meta: serde_json::Value,
    ) -> Self {
        let params = model.params();
        let tensors_info = params
            .iter()
            .map(|(name, p)| TensorInfo {
                name: name.clone(),
                shape: p.shape().to_vec(),
            })
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                artifact_version: super::artifact_version(),
                module: module.to_string(),
                config_hash: config_hash.to_string(),
                seed,
                meta,
                tensors: tensors_info,
            },
            tensors: params.into_iter().map(|(_, p)| p.to_owned()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let n: usize = self.tensors.iter().map(|t| t.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut pos = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in &header.tensors {
            let n: usize = info.shape.iter().product();
            let data = bytes
                .get(pos..pos + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated tensor {}", info.name)))?;
            let values = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(ArrayD::from_shape_vec(IxDyn(&info.shape), values).expect("length matches shape"));
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Errors unless the checkpoint holds `module` trained under
    /// `config_hash`; a hash mismatch is tolerated when `force` is set.
    pub fn check(&self, module: &str, config_hash: &str, force: bool) -> Result<()> {
        if self.header.module != module {
            return Err(Error::Checkpoint(format!(
                "expected a {module} checkpoint, found {}",
                self.header.module
            )));
        }
        if self.header.config_hash != config_hash {
            if force {
                log::warn!("{module} checkpoint config hash differs from the current config; continuing (--force)");
            } else {
                return Err(Error::Checkpoint(format!(
                    "{module} checkpoint was trained with config {} but the current config hashes to {config_hash}; \
                     retrain or pass --force",
                    self.header.config_hash
                )));
            }
        }
        Ok(())
    }

    /// Copies the stored tensors into `model`, which must have exactly the
    /// same parameter names and shapes.
    pub fn load_into<M: Parameters>(&self, model: &mut M) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = model
            .params()
            .into_iter()
            .map(|(n, p)| (n, p.shape().to_vec()))
            .collect();
        if names.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} tensors, checkpoint has {}",
                names.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), info) in names.iter().zip(&self.header.tensors) {
            if *name != info.name || *shape != info.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {shape:?} does not match checkpoint entry {} {:?}",
                    info.name, info.shape
                )));
            }
        }
        for (mut dst, src) in model.params_mut().into_iter().zip(&self.tensors) {
            dst.assign(src);
        }
        Ok(())
    }
}
