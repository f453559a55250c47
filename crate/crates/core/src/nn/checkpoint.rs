//! Parameter checkpoints.
//!
//! Layout: `u64` little-endian header length, UTF-8 JSON header, then every
//! tensor's entries as little-endian `f64` in header order, row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::Parameters;
use crate::error::{Error, Result};
use crate::tensor::Tensor2;

pub const FORMAT: &str = "qvsumm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    /// Full run configuration the parameters were trained with.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode<P: Parameters + ?Sized>(
    params: &P,
    seed: u64,
    config_hash: &str,
    config: serde_json::Value,
) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    params.visit(&mut |name, t| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [t.rows(), t.cols()],
        });
        for v in t.as_slice() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = CheckpointHeader {
        format: FORMAT.to_string(),
        version: VERSION,
        seed,
        config_hash: config_hash.to_string(),
        config,
        tensors,
    };
    let header = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<(String, Tensor2)>)> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Checkpoint("truncated length prefix".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_bytes = bytes
        .get(8..8 + header_len)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let mut payload = &bytes[8 + header_len..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let [r, c] = entry.shape;
        let n = r * c;
        if payload.len() < n * 8 {
            return Err(Error::Checkpoint(format!(
                "payload too short for `{}`",
                entry.name
            )));
        }
        let data = payload[..n * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
        payload = &payload[n * 8..];
        tensors.push((entry.name.clone(), Tensor2::from_vec(r, c, data)?));
    }
    if !payload.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} trailing payload bytes",
            payload.len()
        )));
    }
    Ok((header, tensors))
}

pub fn save<P: Parameters + ?Sized>(
    path: &Path,
    params: &P,
    seed: u64,
    config_hash: &str,
    config: serde_json::Value,
) -> Result<()> {
    let bytes = encode(params, seed, config_hash, config)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Tensor2)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
