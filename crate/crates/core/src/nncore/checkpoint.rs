//! Named parameter snapshots.
//!
//! Layout: magic `ARCK`, u32 version, u64 header length, a JSON header
//! listing every tensor (name, kind, shape, frozen flag, element offset)
//! plus free-form metadata, then all tensor data as little-endian f64.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ARCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum EntryKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
    frozen: bool,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    entries: Vec<Entry>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut offset = 0;
        let tensors = self
            .store
            .params()
            .iter()
            .map(|p| (EntryKind::Param, &p.name, &p.value, p.frozen))
            .chain(
                self.store
                    .buffers()
                    .iter()
                    .map(|b| (EntryKind::Buffer, &b.name, &b.value, false)),
            );
        let mut data = Vec::new();
        for (kind, name, value, frozen) in tensors {
            entries.push(Entry {
                name: name.clone(),
                kind,
                shape: value.shape().to_vec(),
                frozen,
                offset,
            });
            offset += value.numel();
            data.extend(value.data().iter().flat_map(|v| v.to_le_bytes()));
        }
        let header = serde_json::to_vec(&Header {
            entries,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, message: &str| Error::Parse {
            offset: offset as u64,
            message: message.to_string(),
        };
        if bytes.len() < 16 {
            return Err(parse(bytes.len(), "checkpoint shorter than its fixed preamble"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(parse(0, "bad checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| parse(8, "header length exceeds file size"))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| parse(16, &format!("header: {e}")))?;
        let data = &bytes[data_start..];
        let mut store = ParamStore::new();
        for e in &header.entries {
            let n: usize = e.shape.iter().product();
            let lo = e.offset * 8;
            let hi = lo + n * 8;
            if hi > data.len() {
                return Err(parse(data_start + lo, &format!("data for `{}` truncated", e.name)));
            }
            let values = data[lo..hi]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&e.shape, values)?;
            match e.kind {
                EntryKind::Param => {
                    let id = store.add(&e.name, t)?;
                    store.set_frozen(id, e.frozen);
                }
                EntryKind::Buffer => {
                    store.add_buffer(&e.name, t)?;
                }
            }
        }
        Ok(Self {
            store,
            meta: header.meta,
        })
    }

    /// Writes the checkpoint and returns its id.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(content_id(&bytes))
    }

    /// Reads a checkpoint and its id.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bytes(&bytes)?, content_id(&bytes)))
    }
}

/// Hex SHA-256 of a serialized checkpoint.
pub fn content_id(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
