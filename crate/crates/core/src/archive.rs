//! Named-tensor container used for checkpoints, sample outputs and datasets.
//!
//! Layout: 8-byte magic, `u64` little-endian manifest length, JSON manifest,
//! then the raw little-endian payload. Each manifest entry records name,
//! shape, dtype and byte offset into the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SUBFLOW1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tensors: Vec<Entry>,
    pub payload_len: u64,
    pub meta: Value,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: Value,
}

impl Archive {
    pub fn new(meta: Value) -> Self {
        Self {
            tensors: Vec::new(),
            meta,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensor by name or an error naming it.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::CheckpointTensor {
            name: name.to_string(),
            reason: "missing from archive".into(),
        })
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|s| (s, t)))
    }

    /// Serialize with every tensor stored as `f64`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: Dtype::F64,
                offset,
            });
            offset += 8 * t.len() as u64;
        }
        let manifest = Manifest {
            tensors: entries,
            payload_len: offset,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Archive("not an archive (bad magic)".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if mlen > body.len() {
            return Err(Error::Archive(format!(
                "manifest length {mlen} exceeds file size {}",
                bytes.len()
            )));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])
            .map_err(|e| Error::Archive(format!("manifest: {e}")))?;
        let payload = &body[mlen..];
        if payload.len() as u64 != manifest.payload_len {
            return Err(Error::Archive(format!(
                "payload is {} bytes, manifest declares {}",
                payload.len(),
                manifest.payload_len
            )));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + numel * e.dtype.size();
            if e.shape.iter().any(|&d| d == 0) || end > payload.len() {
                return Err(Error::CheckpointTensor {
                    name: e.name.clone(),
                    reason: format!("entry {:?} @ {} does not fit the payload", e.shape, e.offset),
                });
            }
            let raw = &payload[start..end];
            let data: Vec<f64> = match e.dtype {
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
        }
        Ok(Self {
            tensors,
            meta: manifest.meta,
        })
    }

    /// Write through a temporary sibling and rename, so an existing file is
    /// replaced only by a complete archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Archive {
        let mut a = Archive::new(json!({"step": 3, "x": [1.5, -0.25]}));
        a.push("w", Tensor::new(&[2, 2], vec![1.0, -2.0, 0.1, f64::MIN_POSITIVE]).unwrap());
        a.push("b", Tensor::from_vec(vec![3.0]));
        a
    }

    #[test]
    fn round_trip_is_exact_and_idempotent() {
        let a = sample();
        let bytes = a.to_bytes().unwrap();
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let err = Archive::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Archive::from_bytes(&extra).is_err());
        assert!(Archive::from_bytes(b"garbage!garbage!").is_err());
    }

    #[test]
    fn reads_f32_entries() {
        let manifest = Manifest {
            tensors: vec![Entry {
                name: "h".into(),
                shape: vec![2],
                dtype: Dtype::F32,
                offset: 0,
            }],
            payload_len: 8,
            meta: Value::Null,
        };
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut bytes = MAGIC.to_vec();
        bytes.extend((json.len() as u64).to_le_bytes());
        bytes.extend(json);
        bytes.extend(0.5f32.to_le_bytes());
        bytes.extend((-2.0f32).to_le_bytes());
        let a = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a.require("h").unwrap().data(), &[0.5, -2.0]);
        assert!(a.require("nope").unwrap_err().to_string().contains("`nope`"));
    }
}
