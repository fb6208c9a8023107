//! Named-tensor checkpoint container.
//!
//! Layout:
//!
//! ```text
//! FLEA-CHECKPOINT 1\n
//! {"metadata": {...}, "tensors": [{"name", "shape", "dtype", "offset", "length"}, ...]}\n
//! <payload: little-endian f64 values, tensors back to back in header order>
//! ```
//!
//! `offset` and `length` are byte positions relative to the start of the
//! payload. The header is a single JSON line so files can be inspected with
//! `head -2`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "FLEA-CHECKPOINT 1";
const DTYPE: &str = "f64";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    metadata: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(metadata: Value, params: ParamStore) -> Self {
        Self { metadata, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.params.len());
        let mut payload = Vec::with_capacity(self.params.num_scalars() * 8);
        for (name, t) in self.params.iter() {
            let offset = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: DTYPE.to_string(),
                offset,
                length: payload.len() - offset,
            });
        }
        let header = Header {
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let header = serde_json::to_string(&header)
            .map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(MAGIC.len() + header.len() + payload.len() + 2);
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let split_line = |buf: &[u8]| -> Option<usize> { buf.iter().position(|&b| b == b'\n') };
        let magic_end = split_line(bytes)
            .ok_or_else(|| Error::parse(origin, "magic line", "missing newline"))?;
        if &bytes[..magic_end] != MAGIC.as_bytes() {
            return Err(Error::parse(origin, "magic line", "not a checkpoint file"));
        }
        let rest = &bytes[magic_end + 1..];
        let header_end =
            split_line(rest).ok_or_else(|| Error::parse(origin, "header", "truncated header"))?;
        let header: Header = serde_json::from_slice(&rest[..header_end])
            .map_err(|e| Error::parse(origin, "header", e))?;
        let payload = &rest[header_end + 1..];

        let mut params = ParamStore::new();
        let mut expected_end = 0;
        for entry in header.tensors {
            let record = format!("tensor `{}`", entry.name);
            if entry.dtype != DTYPE {
                return Err(Error::parse(origin, record, format!("unsupported dtype {}", entry.dtype)));
            }
            let count: usize = entry.shape.iter().product();
            if entry.length != count * 8 || entry.offset != expected_end {
                return Err(Error::parse(origin, record, "inconsistent offset or length"));
            }
            let end = entry.offset + entry.length;
            if end > payload.len() {
                return Err(Error::parse(origin, record, "payload truncated"));
            }
            let data = payload[entry.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor =
                Tensor::new(entry.shape, data).map_err(|e| Error::parse(origin, record.clone(), e))?;
            params.insert(entry.name, tensor);
            expected_end = end;
        }
        if expected_end != payload.len() {
            return Err(Error::parse(origin, "payload", "trailing bytes after last tensor"));
        }
        Ok(Self {
            metadata: header.metadata,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
