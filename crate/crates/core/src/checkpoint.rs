//! Binary parameter checkpoints.
//!
//! Layout: an 8-byte little-endian manifest length, the UTF-8 JSON manifest
//! (config plus tensor names and shapes), then every tensor's values as
//! little-endian `f64` in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NamedTensor {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn matrix(name: impl Into<String>, m: &Array2<f64>) -> Self {
        Self::new(
            name,
            vec![m.nrows(), m.ncols()],
            m.iter().copied().collect(),
        )
    }

    pub fn vector(name: impl Into<String>, v: &Array1<f64>) -> Self {
        Self::new(name, vec![v.len()], v.to_vec())
    }

    pub fn copy_into(&self, dst: &mut [f64]) -> Result<()> {
        if dst.len() != self.data.len() {
            return Err(Error::Format(format!(
                "tensor {} has {} values, expected {}",
                self.name,
                self.data.len(),
                dst.len()
            )));
        }
        dst.copy_from_slice(&self.data);
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

const FORMAT_TAG: &str = "dhe-checkpoint-v1";

pub fn encode(config: &serde_json::Value, tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        config: config.clone(),
        tensors: tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let values: usize = tensors.iter().map(|t| t.data.len()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 8 * values);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, Vec<NamedTensor>)> {
    let header: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Format("checkpoint shorter than its header".into()))?;
    let json_len = usize::try_from(u64::from_le_bytes(header))
        .map_err(|_| Error::Format("manifest length overflows".into()))?;
    let json_end = 8usize
        .checked_add(json_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("manifest length exceeds file size".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[8..json_end])?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Format(format!(
            "unknown checkpoint format {:?}",
            manifest.format
        )));
    }
    let mut rest = &bytes[json_end..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        let count = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {} shape overflows", entry.name)))?;
        let nbytes = count
            .checked_mul(8)
            .filter(|&n| n <= rest.len())
            .ok_or_else(|| Error::Format(format!("tensor {} is truncated", entry.name)))?;
        let data = read_f64s(&rest[..nbytes]);
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "tensor {} holds non-finite value {bad}",
                entry.name
            )));
        }
        rest = &rest[nbytes..];
        tensors.push(NamedTensor::new(entry.name, entry.shape, data));
    }
    if !rest.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            rest.len()
        )));
    }
    Ok((manifest.config, tensors))
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

pub fn save(
    path: impl AsRef<Path>,
    config: &serde_json::Value,
    tensors: &[NamedTensor],
) -> Result<()> {
    let bytes = encode(config, tensors)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(serde_json::Value, Vec<NamedTensor>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// A plain vector as an 8-byte little-endian count followed by
/// little-endian `f64` values.
pub fn f64_vector_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * values.len());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_f64_vector(path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
    std::fs::write(path, f64_vector_bytes(values))?;
    Ok(())
}

pub fn read_f64_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    let header: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Format("vector file shorter than its header".into()))?;
    let count = u64::from_le_bytes(header);
    if (bytes.len() - 8) as u64 != count.saturating_mul(8) {
        return Err(Error::Format(format!(
            "vector file declares {count} values but holds {} bytes",
            bytes.len() - 8
        )));
    }
    Ok(read_f64s(&bytes[8..]))
}
