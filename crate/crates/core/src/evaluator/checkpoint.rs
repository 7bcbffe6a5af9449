//! Checkpoint files: magic, header length, JSON header, little-endian `f64` payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ScorerDims, ScorerParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DAMRCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in values.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: ScorerDims,
    tensors: Vec<TensorEntry>,
}

pub fn encode(params: &ScorerParams) -> Vec<u8> {
    let mut offset = 0;
    let tensors = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name,
                shape: t.shape.clone(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        dims: params.dims,
        tensors,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 8 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in params.named_tensors() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ScorerParams> {
    let bad = |m: &str| Error::Checkpoint(m.to_owned());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
    if hlen > body.len() {
        return Err(bad("header length exceeds file size"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let payload = &body[hlen..];
    if payload.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of values"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut params = ScorerParams::init(header.dims, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape.clone()))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "header lists {} tensors, dims imply {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if total != values.len() {
        return Err(Error::Checkpoint(format!(
            "payload holds {} values, dims imply {total}",
            values.len()
        )));
    }
    for ((entry, (name, shape)), t) in header.tensors.iter().zip(&expected).zip(params.tensors_mut()) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                entry.name, entry.shape
            )));
        }
        let src = values
            .get(entry.offset..entry.offset + t.len())
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` runs past the payload")))?;
        t.data.copy_from_slice(src);
    }
    if let Some(name) = params.first_non_finite() {
        return Err(Error::Checkpoint(format!("tensor `{name}` holds a non-finite value")));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ScorerParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ScorerParams> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
