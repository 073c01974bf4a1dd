//! Single-file parameter container.
//!
//! Layout: 8-byte magic `MSWPCKPT`, `u32` format version, `u64` header
//! length, a UTF-8 JSON header, then the raw little-endian payload of every
//! block back to back. Training checkpoints store `f64` blocks so a resumed
//! run continues bit-for-bit; inference exports store `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"MSWPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub dtype: DType,
    pub dims: [usize; 2],
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    blocks: Vec<BlockEntry>,
}

/// Named blocks plus free-form JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub blocks: Vec<(String, Matrix)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn to_bytes(&self, dtype: DType) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.blocks.len());
        for (name, m) in &self.blocks {
            entries.push(BlockEntry { name: name.clone(), dtype, dims: [m.rows(), m.cols()], offset: payload.len() });
            match dtype {
                DType::F32 => payload.extend(m.data().iter().flat_map(|v| (*v as f32).to_le_bytes())),
                DType::F64 => payload.extend(m.data().iter().flat_map(|v| v.to_le_bytes())),
            }
        }
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), blocks: entries }).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
        let corrupt = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| corrupt("truncated header"))?;
        let header_bytes = body.get(..hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let payload = &body[hlen..];
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for b in header.blocks {
            let n = b.dims[0] * b.dims[1];
            let w = b.dtype.width();
            let raw = payload
                .get(b.offset..b.offset + n * w)
                .ok_or_else(|| Error::Checkpoint(format!("block {} extends past end of file", b.name)))?;
            let data: Vec<f64> = match b.dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
            };
            blocks.push((b.name, Matrix::from_vec(b.dims[0], b.dims[1], data)));
        }
        Ok(Container { meta: header.meta, blocks })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn write(&self, path: &Path, dtype: DType) -> Result<()> {
        write_atomic(path, &self.to_bytes(dtype))
    }

    pub fn read(path: &Path) -> Result<Container> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            meta: serde_json::json!({"kind": "test"}),
            blocks: vec![
                ("a".into(), Matrix::from_rows(&[vec![0.1, -2.5], vec![3.0, 1e-300]])),
                ("b".into(), Matrix::row_vector(&[std::f64::consts::PI])),
            ],
        }
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let c = sample();
        assert_eq!(Container::from_bytes(&c.to_bytes(DType::F64)).unwrap(), c);
    }

    #[test]
    fn f32_round_trip_narrows() {
        let back = Container::from_bytes(&sample().to_bytes(DType::F32)).unwrap();
        assert_eq!(back.get("b").unwrap().item(), std::f64::consts::PI as f32 as f64);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes(DType::F64);
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Container::from_bytes(b"garbage garbage garbage").is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(Container::from_bytes(&wrong_version).unwrap_err().to_string().contains("version"));
    }
}
