//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, u64 LE metadata length, UTF-8 JSON metadata, zero
//! padding to an 8-byte boundary, then raw little-endian f32 tensor payloads.
//! Every payload starts at an 8-byte aligned offset (relative to the start
//! of the payload section) recorded in the metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FSRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    metadata: Value,
    tensors: Vec<TensorEntry>,
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

impl Checkpoint {
    pub fn new(metadata: Value) -> Self {
        Checkpoint {
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// All tensors whose name starts with `prefix`, in stored order, prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|s| (s, t)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: offset as u64,
            });
            offset = align8(offset + 4 * t.len());
        }
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let start = align8(16 + json.len());
        let mut buf = Vec::with_capacity(start + offset);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        buf.resize(start, 0);
        for ((_, t), e) in self.tensors.iter().zip(&header.tensors) {
            buf.resize(start + e.offset as usize, 0);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.resize(start + offset, 0);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let corrupt = |msg: String| Error::Corruption {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < 16 {
            return Err(corrupt(format!("file is only {} bytes", bytes.len())));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(format("not a checkpoint (bad magic)".into()));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json_end = 16usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("metadata runs past end of file".into()))?;
        let raw: Value = serde_json::from_slice(&bytes[16..json_end]).map_err(|e| format(e.to_string()))?;
        let version = raw.get("format_version").and_then(Value::as_u64);
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Incompatible(format!(
                "{}: checkpoint format version {:?} (supported: {})",
                path.display(),
                version,
                CHECKPOINT_VERSION
            )));
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| format(e.to_string()))?;
        let start = align8(json_end);
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_end = 0usize;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let lo = start + e.offset as usize;
            let hi = lo + 4 * n;
            if e.offset % 8 != 0 {
                return Err(format(format!("tensor {} at unaligned offset {}", e.name, e.offset)));
            }
            if hi > bytes.len() {
                return Err(corrupt(format!("tensor {} truncated", e.name)));
            }
            let data = bytes[lo..hi]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
            expected_end = align8(e.offset as usize + 4 * n);
        }
        if bytes.len() != start + expected_end {
            return Err(corrupt(format!(
                "file is {} bytes, layout needs {}",
                bytes.len(),
                start + expected_end
            )));
        }
        Ok(Checkpoint {
            metadata: header.metadata,
            tensors,
        })
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &ck.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(json!({"step": 5, "lr": 1e-4, "name": "x"}));
        ck.push("a", Tensor::new(vec![3], vec![1.0, -2.5, f32::MIN_POSITIVE]).unwrap());
        ck.push("b", Tensor::new(vec![1, 2], vec![0.1, 0.2]).unwrap());
        ck.push("empty", Tensor::new(vec![0], vec![]).unwrap());
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn payloads_are_aligned() {
        let bytes = sample().to_bytes().unwrap();
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let start = align8(16 + json_len);
        assert_eq!(start % 8, 0);
        // "a" has 3 floats (12 bytes) so "b" starts at 16
        assert_eq!(f32::from_le_bytes(bytes[start + 16..start + 20].try_into().unwrap()), 0.1);
    }

    #[test]
    fn truncation_and_version_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 8], Path::new("x")),
            Err(Error::Corruption { .. })
        ));
        let mut ck = Checkpoint::new(json!({}));
        ck.push("a", Tensor::new(vec![1], vec![1.0]).unwrap());
        let good = ck.to_bytes().unwrap();
        let text = String::from_utf8_lossy(&good[16..]).into_owned();
        let patched = text.replacen("\"format_version\":1", "\"format_version\":7", 1);
        let mut bad = good[..16].to_vec();
        bad.extend_from_slice(patched.as_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bad, Path::new("x")), Err(Error::Incompatible(_))));
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic, Path::new("x")), Err(Error::Format { .. })));
    }
}
