//! Named parameter storage and its file format.
//!
//! Layout of a weights file:
//!
//! ```text
//! "DAOW"                      4 bytes magic
//! version                     u32 little-endian, currently 1
//! header_len                  u64 little-endian
//! header                      header_len bytes of UTF-8 JSON
//! payload                     concatenated .tns encodings
//! ```
//!
//! The header is `{"tensors":[{"path":P,"dims":[..],"offset":O,"nbytes":B},..]}`
//! with entries in manifest order. `offset` counts from the first payload
//! byte and entries are contiguous, so the first offset is 0 and each entry
//! starts where the previous one ends. The JSON is written compactly with keys
//! in the order shown, which makes save → load → save byte-identical.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"DAOW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub dims: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

/// Ordered map from parameter path to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) -> Result<()> {
        let path = path.into();
        if self.index.contains_key(&path) {
            return Err(Error::config(format!("duplicate weight path `{path}`")));
        }
        self.index.insert(path.clone(), self.entries.len());
        self.entries.push((path, t));
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.index.get(path).map(|&i| &self.entries[i].1)
    }

    pub fn require(&self, path: &str) -> Result<&Tensor> {
        self.get(path).ok_or_else(|| Error::MissingWeight(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.index.get(path).map(|&i| &mut self.entries[i].1)
    }

    /// Replaces an existing tensor, keeping its manifest position. Dims must match.
    pub fn set(&mut self, path: &str, t: Tensor) -> Result<()> {
        let slot = self.get_mut(path).ok_or_else(|| Error::MissingWeight(path.to_string()))?;
        if slot.dims() != t.dims() {
            return Err(Error::shape(format!("`{path}`: dims {:?} vs stored {:?}", t.dims(), slot.dims())));
        }
        *slot = t;
        Ok(())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.index.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> + '_ {
        self.entries.iter().map(|(p, t)| (p.as_str(), t))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> + '_ {
        self.entries.iter().map(|(p, _)| p.as_str())
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> u64 {
        self.entries.iter().map(|(_, t)| t.len() as u64).sum()
    }

    /// Entries whose path starts with `prefix`, with the prefix kept.
    pub fn with_prefix(&self, prefix: &str) -> WeightStore {
        let mut out = WeightStore::new();
        for (p, t) in self.iter().filter(|(p, _)| p.starts_with(prefix)) {
            out.insert(p, t.clone()).expect("paths are unique");
        }
        out
    }

    /// Zeroes every tensor whose path starts with `prefix`; returns how many matched.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut hit = 0;
        for (p, t) in self.entries.iter_mut() {
            if p.starts_with(prefix) {
                t.data_mut().fill(0.0);
                hit += 1;
            }
        }
        hit
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0u64;
        self.entries
            .iter()
            .map(|(path, t)| {
                let nbytes = (8 + 4 * t.rank() + 4 * t.len()) as u64;
                let e = ManifestEntry { path: path.clone(), dims: t.dims().to_vec(), offset, nbytes };
                offset += nbytes;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header { tensors: self.manifest() }).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.entries {
            t.write_tns(&mut out).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fe = |field: &str, msg: String| Error::Format { field: field.to_string(), msg };
        if bytes.len() < 16 {
            return Err(fe("weights header", "file shorter than fixed header".into()));
        }
        if &bytes[..4] != WEIGHTS_MAGIC {
            return Err(fe("weights magic", format!("expected \"DAOW\", found {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != WEIGHTS_VERSION {
            return Err(fe("weights version", format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_bytes = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| fe("weights header", format!("header length {hlen} exceeds file")))?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| fe("weights header", format!("invalid manifest JSON: {e}")))?;
        let payload = &bytes[16 + hlen..];
        let mut store = WeightStore::new();
        let mut expected_offset = 0u64;
        for entry in header.tensors {
            if entry.offset != expected_offset {
                return Err(fe(
                    "manifest offset",
                    format!("`{}` at offset {}, expected {expected_offset}", entry.path, entry.offset),
                ));
            }
            let start = entry.offset as usize;
            let end = start.saturating_add(entry.nbytes as usize);
            let chunk = payload.get(start..end).ok_or_else(|| {
                fe("payload", format!("`{}` payload shorter than header dims", entry.path))
            })?;
            let t = Tensor::from_tns_bytes(chunk).map_err(|e| match e {
                Error::Format { field, msg } => fe(&field, format!("`{}`: {msg}", entry.path)),
                other => other,
            })?;
            if t.dims() != entry.dims.as_slice() {
                return Err(fe(
                    "manifest dims",
                    format!("`{}` manifest dims {:?} but payload dims {:?}", entry.path, entry.dims, t.dims()),
                ));
            }
            expected_offset = entry.offset + entry.nbytes;
            store
                .insert(entry.path.clone(), t)
                .map_err(|_| fe("manifest path", format!("duplicate path `{}`", entry.path)))?;
        }
        if expected_offset as usize != payload.len() {
            return Err(fe("payload", format!("{} trailing bytes", payload.len() - expected_offset as usize)));
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Bitwise equality of paths, order and every value.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((pa, ta), (pb, tb))| pa == pb && ta.bit_eq(tb))
    }
}
