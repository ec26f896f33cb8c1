//! Self-describing container: a JSON metadata block followed by raw
//! little-endian `f64` blobs.
//!
//! ```text
//! DALARCH1\n
//! <json length in bytes, decimal>\n
//! <json>\n
//! <blob bytes ...>
//! ```
//!
//! The JSON holds the caller's metadata under `meta` and a blob table
//! (`name`, `offset`, `len` in values) under `blobs`. Writing the same content
//! twice yields identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{DalError, Result};

const MAGIC: &[u8] = b"DALARCH1\n";

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    blobs: Vec<BlobEntry>,
}

#[derive(Debug, Default, Clone)]
pub struct Archive {
    pub meta: Value,
    blobs: BTreeMap<String, Vec<f64>>,
    order: Vec<String>,
}

impl Archive {
    pub fn new(meta: Value) -> Self {
        Archive {
            meta,
            ..Default::default()
        }
    }

    pub fn put(&mut self, name: impl Into<String>, values: Vec<f64>) {
        let name = name.into();
        if self.blobs.insert(name.clone(), values).is_none() {
            self.order.push(name);
        }
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.blobs
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| DalError::Format(format!("missing blob `{name}`")))
    }

    pub fn blob_names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0usize;
        let mut table = Vec::with_capacity(self.order.len());
        for name in &self.order {
            let len = self.blobs[name].len();
            table.push(BlobEntry {
                name: name.clone(),
                offset,
                len,
            });
            offset += len;
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            blobs: table,
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + header.len() + 32 + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(format!("{}\n", header.len()).as_bytes());
        out.extend_from_slice(&header);
        out.push(b'\n');
        for name in &self.order {
            for v in &self.blobs[name] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| DalError::Format("not a DAL archive (bad magic)".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| DalError::Format("truncated archive header".into()))?;
        let len: usize = std::str::from_utf8(&rest[..nl])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DalError::Format("bad header length".into()))?;
        let rest = &rest[nl + 1..];
        if rest.len() < len + 1 {
            return Err(DalError::Format("truncated archive header".into()));
        }
        let header: Header = serde_json::from_slice(&rest[..len])?;
        let data = &rest[len + 1..];
        let mut archive = Archive::new(header.meta);
        for entry in header.blobs {
            let start = entry.offset * 8;
            let end = start + entry.len * 8;
            if end > data.len() {
                return Err(DalError::Format(format!("blob `{}` out of bounds", entry.name)));
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            archive.put(entry.name, values);
        }
        Ok(archive)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
