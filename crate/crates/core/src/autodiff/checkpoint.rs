//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes   "VRNCKPT1"
//! len      u64 LE    byte length of the manifest
//! manifest JSON      {"meta": ..., "tensors": [{name, shape, dtype, offset}]}
//! data               little-endian f64 values; `offset` is relative to the
//!                    start of this section
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VRNCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(store: &ParamStore, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut data = Vec::with_capacity(store.num_scalars() * 8);
    for (name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: data.len() as u64,
        });
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest {
        meta: meta.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + manifest.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    let data = &bytes[16 + len..];
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        if e.dtype != "f64" {
            return Err(bad(&format!("unsupported dtype {}", e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let raw = data
            .get(start..start + n * 8)
            .ok_or_else(|| bad(&format!("tensor {} out of bounds", e.name)))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(&e.name, Tensor::new(e.shape.clone(), values)?)?;
    }
    Ok((store, manifest.meta))
}

pub fn save(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let bytes = encode(store, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
