//! `DAPE1` checkpoint: magic, manifest, little-endian `f64` payload.
//!
//! Layout: 8-byte magic `DAPE1\0\0\0`, `u64` manifest length, JSON manifest
//! (config echo plus name/shape/offset per tensor), then every tensor's
//! elements in manifest order. Offsets count elements from the payload start.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::DapeConfig;
use crate::error::{DapeError, Result};
use crate::model::DapeModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DAPE1\0\0\0";

const TEMPERATURE: &str = "temperature";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: DapeConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<S: Scalar>(model: &DapeModel<S>) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.store.len() + 1);
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    let temp = Tensor::scalar(model.temperature);
    let all = model.store.iter().chain(std::iter::once((TEMPERATURE, &temp)));
    for (name, t) in all {
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset });
        for &x in t.data() {
            payload.extend_from_slice(&x.as_f64().to_le_bytes());
        }
        offset += t.len();
    }
    let manifest = Manifest { config: model.config.clone(), tensors };
    let json = serde_json::to_vec(&manifest).map_err(|e| DapeError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<DapeModel<S>> {
    let fail = |m: &str| DapeError::Format(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fail("missing DAPE1 magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| fail("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| DapeError::Format(format!("manifest: {e}")))?;
    let payload = &bytes[16 + len..];
    if payload.len() % 8 != 0 {
        return Err(fail("payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut model = DapeModel::<S>::new(manifest.config.clone())?;
    let expected = model.store.len() + 1;
    if manifest.tensors.len() != expected {
        return Err(DapeError::Format(format!("{} tensors, config implies {expected}", manifest.tensors.len())));
    }
    let mut end = 0;
    for (k, e) in manifest.tensors.iter().enumerate() {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| DapeError::Format(format!("tensor {} runs past the payload", e.name)))?;
        end = end.max(e.offset + n);
        let t = Tensor::<S>::from_f64(&e.shape, data)?;
        if k + 1 == expected {
            if e.name != TEMPERATURE || n != 1 {
                return Err(DapeError::Format(format!("expected {TEMPERATURE} last, found {}", e.name)));
            }
            model.temperature = t.data()[0];
            continue;
        }
        if model.store.names()[k] != e.name || model.store.get(k).shape() != e.shape.as_slice() {
            return Err(DapeError::Format(format!(
                "tensor {k} is {} {:?}, config implies {} {:?}",
                e.name,
                e.shape,
                model.store.names()[k],
                model.store.get(k).shape()
            )));
        }
        *model.store.get_mut(k) = t;
    }
    if end != values.len() {
        return Err(DapeError::Format(format!("{} trailing payload values", values.len() - end)));
    }
    Ok(model)
}

pub fn save<S: Scalar>(model: &DapeModel<S>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| DapeError::io(path, e))
}

pub fn load<S: Scalar>(path: &Path) -> Result<DapeModel<S>> {
    let bytes = std::fs::read(path).map_err(|e| DapeError::io(path, e))?;
    from_bytes(&bytes)
}
