//! Checkpoint file format: a single-line compact JSON manifest (tensor
//! names, shapes, dtype, config snapshot, extra run state), a newline,
//! then the raw little-endian f32 buffers concatenated in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, Parameters};
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint manifest: {0}")]
    Manifest(String),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub num_items: usize,
    pub tensors: Vec<TensorEntry>,
    /// Run state owned by the caller (optimizer step, rng position, best
    /// metric, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// In-memory checkpoint: named buffers in manifest order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub num_items: usize,
    pub buffers: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub extra: serde_json::Value,
}

pub const FORMAT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn buffer(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f32>)> {
        self.buffers.iter().find(|(n, _, _)| n == name)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dtype: "f32le".to_string(),
            config: self.config.clone(),
            num_items: self.num_items,
            tensors: self
                .buffers
                .iter()
                .map(|(name, shape, _)| TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
            extra: self.extra.clone(),
        };
        let header =
            serde_json::to_string(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(header.as_bytes())?;
        file.write_all(b"\n")?;
        for (_, _, values) in &self.buffers {
            let mut bytes = Vec::with_capacity(values.len() * 4);
            for v in values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            file.write_all(&bytes)?;
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Manifest("missing manifest line".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Manifest(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        if manifest.dtype != "f32le" {
            return Err(CheckpointError::Manifest(format!(
                "unsupported dtype {}",
                manifest.dtype
            )));
        }
        manifest
            .config
            .validate()
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let mut off = newline + 1;
        let mut buffers = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let need = n * 4;
            if off + need > bytes.len() {
                return Err(CheckpointError::Manifest(format!(
                    "buffer {} extends past end of file",
                    entry.name
                )));
            }
            let mut values = Vec::with_capacity(n);
            for i in 0..n {
                values.push(f32::from_le_bytes(
                    bytes[off + 4 * i..off + 4 * i + 4].try_into().unwrap(),
                ));
            }
            off += need;
            buffers.push((entry.name.clone(), entry.shape.clone(), values));
        }
        if off != bytes.len() {
            return Err(CheckpointError::Manifest(format!(
                "{} trailing bytes after declared buffers",
                bytes.len() - off
            )));
        }
        Ok(Checkpoint {
            config: manifest.config,
            num_items: manifest.num_items,
            buffers,
            extra: manifest.extra,
        })
    }
}

/// Serializes parameters into checkpoint buffers in traversal order.
pub fn params_to_buffers(params: &Parameters<f32>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| (name, t.shape().to_vec(), t.values().to_vec()))
        .collect()
}

/// Rebuilds parameters from a checkpoint, validating every name and shape
/// against a fresh skeleton built from the stored config.
pub fn params_from_checkpoint(ckpt: &Checkpoint) -> Result<Parameters<f32>, CheckpointError> {
    let mut params = Parameters::<f32>::init(&ckpt.config, ckpt.num_items, 0)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    for (name, tensor) in params.named_tensors_mut() {
        let (_, shape, values) = ckpt.buffer(&name).ok_or_else(|| {
            CheckpointError::Mismatch(format!("checkpoint is missing tensor {name}"))
        })?;
        if shape != tensor.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "tensor {} has shape {:?}, expected {:?}",
                name,
                shape,
                tensor.shape()
            )));
        }
        tensor.values_mut().copy_from_slice(values);
    }
    Ok(params)
}

/// Convenience: tensor from a named checkpoint buffer.
pub fn buffer_as_tensor(ckpt: &Checkpoint, name: &str) -> Option<Tensor<f32>> {
    ckpt.buffer(name)
        .map(|(_, shape, values)| Tensor::new(values.clone(), shape.clone()))
}
