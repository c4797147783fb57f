//! The `LGOM` tensor container: magic, version, a JSON manifest and
//! little-endian arrays each starting on a 64-byte boundary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LGOM";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    I32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::I32(_) => Dtype::I32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
}

/// Named arrays in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    tensors: Vec<Tensor>,
}

fn padded(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: TensorData) -> Result<()> {
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(Error::arg(name, "duplicate tensor name"));
        }
        let n: usize = shape.iter().product();
        Error::check_len("tensor data", n, data.len())?;
        self.tensors.push(Tensor { name: name.to_string(), shape, data });
        Ok(())
    }

    pub fn push_f32(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        self.push(name, shape, TensorData::F32(data))
    }

    pub fn push_i32(&mut self, name: &str, shape: Vec<usize>, data: Vec<i32>) -> Result<()> {
        self.push(name, shape, TensorData::I32(data))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest: Vec<ManifestEntry> = self
            .tensors
            .iter()
            .map(|t| ManifestEntry { name: t.name.clone(), dtype: t.data.dtype(), shape: t.shape.clone() })
            .collect();
        let text = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(&text);
        out.resize(padded(out.len()), 0);
        for t in &self.tensors {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
            out.resize(padded(out.len()), 0);
        }
        out
    }

    /// Parses a container; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |field: &str, reason: String| Error::format(path, field, reason);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("magic", "not an LGOM container".into()));
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(bad("version", format!("unsupported version {version}")));
        }
        let len = word(8) as usize;
        let text = bytes.get(12..12 + len).ok_or_else(|| bad("manifest", "truncated".into()))?;
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(text).map_err(|e| bad("manifest", e.to_string()))?;
        let mut offset = padded(12 + len);
        let mut out = Container::new();
        for e in manifest {
            let n: usize = e.shape.iter().product();
            let end = offset + 4 * n;
            let raw = bytes.get(offset..end).ok_or_else(|| bad(&e.name, format!("payload truncated at byte {offset}")))?;
            let data = match e.dtype {
                Dtype::F32 => TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                Dtype::I32 => TensorData::I32(raw.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            out.push(&e.name, e.shape, data).map_err(|err| bad(&e.name, err.to_string()))?;
            offset = padded(end);
        }
        if offset != bytes.len() {
            return Err(bad("payload", format!("{} trailing bytes", bytes.len() as i64 - offset as i64)));
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// The `f32` tensor `name` with its shape, or a format error naming it.
    pub fn f32(&self, name: &str, path: &Path) -> Result<(&[usize], &[f32])> {
        match self.get(name) {
            Some(Tensor { shape, data: TensorData::F32(v), .. }) => Ok((shape, v)),
            Some(_) => Err(Error::format(path, name, "expected f32")),
            None => Err(Error::format(path, name, "missing")),
        }
    }

    pub fn i32(&self, name: &str, path: &Path) -> Result<(&[usize], &[i32])> {
        match self.get(name) {
            Some(Tensor { shape, data: TensorData::I32(v), .. }) => Ok((shape, v)),
            Some(_) => Err(Error::format(path, name, "expected i32")),
            None => Err(Error::format(path, name, "missing")),
        }
    }
}
