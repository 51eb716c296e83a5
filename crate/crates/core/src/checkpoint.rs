//! Binary checkpoint container.
//!
//! Layout: the magic bytes `NCOL1`, a little-endian `u64` header length, a
//! JSON header, then the payload of little-endian `f32` values. The header
//! lists every array as `{name, shape, offset}` with `offset` counted in
//! bytes from the start of the payload:
//!
//! ```json
//! {"kind": "generator", "config": {...},
//!  "arrays": [{"name": "g.seed.w", "shape": [512, 32], "offset": 0}, ...],
//!  "running_stats": [{"name": "g.block1.norm1.running_mean", ...}]}
//! ```

use std::path::Path;

use collage_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CollageError, Result};

pub const MAGIC: &[u8; 5] = b"NCOL1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    arrays: Vec<ArrayEntry>,
    running_stats: Vec<ArrayEntry>,
}

/// Named weight arrays, architecture config and normalization state of one
/// model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
    pub running_stats: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Checkpoint { kind: kind.to_string(), config, arrays: Vec::new(), running_stats: Vec::new() }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(CollageError::Format(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn running_stat(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let (_, t) = self
            .running_stats
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| CollageError::Format(format!("missing running statistic {name}")))?;
        if t.numel() != len {
            return Err(CollageError::Format(format!("{name} has {} values, expected {len}", t.numel())));
        }
        Ok(t.data().to_vec())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload: Vec<u8> = Vec::new();
        let mut entries = |list: &[(String, Tensor)]| -> Vec<ArrayEntry> {
            list.iter()
                .map(|(name, t)| {
                    let offset = payload.len();
                    for v in t.data() {
                        payload.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                    ArrayEntry { name: name.clone(), shape: t.shape().to_vec(), offset }
                })
                .collect()
        };
        let arrays = entries(&self.arrays);
        let running_stats = entries(&self.running_stats);
        let header = Header { kind: self.kind.clone(), config: self.config.clone(), arrays, running_stats };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| CollageError::Format(m.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(fmt("missing NCOL1 magic"));
        }
        let mut len_bytes = [0u8; 8];
        len_bytes.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let start = MAGIC.len() + 8;
        let end = start.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| fmt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[start..end])?;
        let payload = &bytes[end..];
        let read = |list: &[ArrayEntry]| -> Result<Vec<(String, Tensor)>> {
            list.iter()
                .map(|e| {
                    let n: usize = e.shape.iter().product();
                    let stop = e.offset + 4 * n;
                    if stop > payload.len() {
                        return Err(CollageError::Format(format!("array {} runs past the payload", e.name)));
                    }
                    let data = payload[e.offset..stop]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                        .collect();
                    Ok((e.name.clone(), Tensor::new(e.shape.clone(), data)?))
                })
                .collect()
        };
        Ok(Checkpoint {
            arrays: read(&header.arrays)?,
            running_stats: read(&header.running_stats)?,
            kind: header.kind,
            config: header.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new("test", serde_json::json!({"a": 1, "b": [2, 3]}));
        ck.arrays.push(("w".into(), Tensor::new(vec![2, 2], vec![0.1, -2.5, 3.0e-8, 7.0]).unwrap()));
        ck.running_stats.push(("m".into(), Tensor::from_vec(vec![1.0 / 3.0])));
        ck
    }

    #[test]
    fn round_trip_is_bit_exact_at_f32() {
        let bytes = sample().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.arrays[0].1.data()[0], 0.1f32 as f64);
        assert_eq!(back.running_stats[0].1.data()[0], (1.0f32 / 3.0) as f64);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"NCOL1");
        let len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[13..13 + len]).unwrap();
        assert_eq!(header["arrays"][0]["name"], "w");
        assert_eq!(header["arrays"][0]["shape"], serde_json::json!([2, 2]));
        assert_eq!(header["running_stats"][0]["offset"], 16);
        assert_eq!(bytes.len(), 13 + len + 5 * 4);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        let mut bytes = sample().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
