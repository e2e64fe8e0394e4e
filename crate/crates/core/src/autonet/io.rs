//! Parameter files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8    magic "DIFFREP1"
//! bytes 8..16   u64 length H of the JSON header
//! bytes 16..16+H  JSON header {"tensors": [{name, rows, cols, offset}], "meta": {...}}
//! remainder     f64 values; `offset` is the byte offset of a tensor's first
//!               value from the start of this section, values row-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::numeric::Matrix;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"DIFFREP1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn encode_params(store: &ParamStore, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (name, m) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            offset,
        });
        offset += m.len() * 8;
    }
    let header = serde_json::to_vec(&Header {
        tensors,
        meta: meta.clone(),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, m) in store.iter() {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing DIFFREP1 magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize.checked_add(hlen).ok_or_else(|| bad("header length overflow"))?;
    if bytes.len() < data_start {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
    let data = &bytes[data_start..];
    let mut store = ParamStore::new();
    for t in header.tensors {
        let len = t.rows * t.cols;
        let end = t.offset + len * 8;
        if end > data.len() {
            return Err(bad(&format!("tensor {} runs past end of file", t.name)));
        }
        let values = data[t.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(t.name, Matrix::from_vec(t.rows, t.cols, values)?)?;
    }
    Ok((store, header.meta))
}

pub fn save_params(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let bytes = encode_params(store, meta)?;
    crate::pipeline::write_atomic(path, &bytes)
}

pub fn load_params(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes, path)
}
