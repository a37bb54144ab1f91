//! Parameter checkpoints: an 8-byte little-endian header length, a JSON
//! header, then the concatenated parameters as little-endian `f32`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::{Float, Tensor};

pub const FORMAT: &str = "rvernet-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset of the first value, in `f32` elements from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    tensors: Vec<CheckpointEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Named `f32` tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    /// Adds a tensor, narrowing to `f32`.
    pub fn push<T: Float>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), t.cast()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            if entries.iter().any(|e: &CheckpointEntry| &e.name == name) {
                return Err(TensorError::Checkpoint(format!("duplicate tensor name {name}")));
            }
            entries.push(CheckpointEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
            offset += t.len();
        }
        let header = Header { format: FORMAT.to_string(), tensors: entries, meta: self.meta.clone() };
        let json = serde_json::to_vec(&header).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + json.len() + 4 * offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| TensorError::Checkpoint(msg);
        if bytes.len() < 8 {
            return Err(bad("file shorter than its length prefix".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad(format!("header length {hlen} exceeds file")))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != FORMAT {
            return Err(bad(format!("unknown format {:?}", header.format)));
        }
        let data = &bytes[8 + hlen..];
        if !data.len().is_multiple_of(4) {
            return Err(bad("data section is not a whole number of f32 values".into()));
        }
        let values: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let slice = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| bad(format!("tensor {} runs past the data section", e.name)))?;
            tensors.push((e.name, Tensor::new(&e.shape, slice.to_vec())?));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| TensorError::Checkpoint(format!("{}: {e}", path.display())))?;
        f.write_all(&bytes).map_err(|e| TensorError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| TensorError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_lists_offsets() {
        let mut ck = Checkpoint::new(serde_json::json!({"kind": "test"}));
        ck.push("a", &Tensor::<f64>::from_fn(&[2, 3], |i| i as f64));
        ck.push("b", &Tensor::<f32>::full(&[4], 0.5));
        let bytes = ck.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header.tensors[1].offset, 6);
        assert_eq!(bytes.len(), 8 + hlen + 4 * 10);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_truncated_data() {
        let mut ck = Checkpoint::new(serde_json::Value::Null);
        ck.push("a", &Tensor::<f32>::full(&[4], 1.0));
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..4]).is_err());
    }
}
