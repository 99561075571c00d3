//! Binary container shared by spectrogram files and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0..8    magic  b"WSEPCTR1"
//! 8..12   u32    header length H
//! 12..    H bytes UTF-8 JSON header:
//!           {"kind": str, "schema_version": u32, "meta": any,
//!            "arrays": [{"name": str, "shape": [usize, ...]}, ...]}
//! then    f64 payload, arrays concatenated in header order, row-major
//! ```
//!
//! The payload must be exactly as long as the shapes demand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"WSEPCTR1";
const MAX_HEADER: usize = 16 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NamedArray {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub schema_version: u32,
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    schema_version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

impl Container {
    pub fn new(kind: impl Into<String>, schema_version: u32, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.into(),
            schema_version,
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.arrays.push(NamedArray::new(name, shape, data));
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            schema_version: self.schema_version,
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| ArrayEntry {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.arrays.iter().map(|a| a.data.len() * 8).sum();
        let mut out = Vec::with_capacity(12 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Format(format!("container: {msg}"));
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if hlen > MAX_HEADER || 12 + hlen > bytes.len() {
            return Err(bad(format!("header length {hlen} out of range")));
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + hlen]).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &bytes[12 + hlen..];
        let mut expected = 0usize;
        for a in &header.arrays {
            let n = a
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| bad(format!("array `{}` shape overflows", a.name)))?;
            expected = expected
                .checked_add(n)
                .ok_or_else(|| bad("payload size overflows".into()))?;
        }
        if expected != payload.len() {
            return Err(bad(format!(
                "payload is {} bytes, header describes {expected}",
                payload.len()
            )));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        let mut chunks = payload.chunks_exact(8);
        for a in header.arrays {
            let n: usize = a.shape.iter().product();
            let data = chunks
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push(NamedArray {
                name: a.name,
                shape: a.shape,
                data,
            });
        }
        Ok(Container {
            kind: header.kind,
            schema_version: header.schema_version,
            meta: header.meta,
            arrays,
        })
    }

    pub fn expect_kind(&self, kind: &str, max_version: u32) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} file, found `{}`", self.kind)));
        }
        if self.schema_version == 0 || self.schema_version > max_version {
            return Err(Error::Format(format!(
                "{kind} schema version {} is not supported (max {max_version})",
                self.schema_version
            )));
        }
        Ok(())
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("{} file has no array `{name}`", self.kind)))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write-then-rename so a concurrent reader never sees a torn file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
