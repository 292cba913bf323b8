//! Named tensor collections and the checksummed snapshot container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "OMGA1\n"                 6-byte magic
//! u64 manifest_len
//! u32 manifest_crc32
//! manifest                  JSON: { version, metadata, sections: [...] }
//! blob                      concatenated raw section payloads
//! ```
//!
//! Every section descriptor carries `{name, dtype, shape, byte_offset,
//! byte_len, crc32}` with offsets relative to the start of the blob.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"OMGA1\n";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: TensorData::F32(data),
        }
    }

    pub fn from_u32(shape: Vec<usize>, data: Vec<u32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: TensorData::U32(data),
        }
    }

    pub fn from_array1(a: &Array1<f32>) -> Self {
        Self::from_f32(vec![a.len()], a.iter().copied().collect())
    }

    pub fn from_array2(a: &Array2<f32>) -> Self {
        Self::from_f32(a.shape().to_vec(), a.iter().copied().collect())
    }

    pub fn from_array3(a: &Array3<f32>) -> Self {
        Self::from_f32(a.shape().to_vec(), a.iter().copied().collect())
    }

    pub fn from_vec3s(v: &[[f32; 3]]) -> Self {
        Self::from_f32(vec![v.len(), 3], v.iter().flatten().copied().collect())
    }

    pub fn from_faces(f: &[[u32; 3]]) -> Self {
        Self::from_u32(vec![f.len(), 3], f.iter().flatten().copied().collect())
    }

    pub fn dtype(&self) -> &'static str {
        match self.data {
            TensorData::F32(_) => "f32",
            TensorData::U32(_) => "u32",
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn f32s(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U32(_) => Err(Error::Invalid("expected an f32 tensor".into())),
        }
    }

    pub fn u32s(&self) -> Result<&[u32]> {
        match &self.data {
            TensorData::U32(v) => Ok(v),
            TensorData::F32(_) => Err(Error::Invalid("expected a u32 tensor".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_bytes(name: &str, dtype: &str, shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let count: usize = shape.iter().product();
        if bytes.len() != count * 4 {
            return Err(Error::Truncated {
                name: name.to_string(),
                needed: count * 4,
                available: bytes.len(),
            });
        }
        let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        match dtype {
            "f32" => Ok(Self::from_f32(shape, words.map(f32::from_le_bytes).collect())),
            "u32" => Ok(Self::from_u32(shape, words.map(u32::from_le_bytes).collect())),
            other => Err(Error::Invalid(format!("section {name}: unknown dtype {other}"))),
        }
    }
}

/// Ordered map of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap(pub BTreeMap<String, Tensor>);

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.0.get(name).ok_or_else(|| Error::MissingSection(name.to_string()))
    }

    pub fn f32s(&self, name: &str) -> Result<&[f32]> {
        self.get(name)?.f32s()
    }

    pub fn u32s(&self, name: &str) -> Result<&[u32]> {
        self.get(name)?.u32s()
    }

    fn shaped(&self, name: &str, rank: usize) -> Result<(&Tensor, &[f32])> {
        let t = self.get(name)?;
        if t.shape.len() != rank {
            return Err(Error::dims(format!("rank of {name}"), rank, t.shape.len()));
        }
        Ok((t, t.f32s()?))
    }

    pub fn array1(&self, name: &str) -> Result<Array1<f32>> {
        let (_, d) = self.shaped(name, 1)?;
        Ok(Array1::from(d.to_vec()))
    }

    pub fn array2(&self, name: &str) -> Result<Array2<f32>> {
        let (t, d) = self.shaped(name, 2)?;
        Array2::from_shape_vec((t.shape[0], t.shape[1]), d.to_vec()).map_err(|e| Error::Invalid(format!("{name}: {e}")))
    }

    pub fn array3(&self, name: &str) -> Result<Array3<f32>> {
        let (t, d) = self.shaped(name, 3)?;
        Array3::from_shape_vec((t.shape[0], t.shape[1], t.shape[2]), d.to_vec())
            .map_err(|e| Error::Invalid(format!("{name}: {e}")))
    }

    pub fn vec3s(&self, name: &str) -> Result<Vec<[f32; 3]>> {
        let (t, d) = self.shaped(name, 2)?;
        if t.shape[1] != 3 {
            return Err(Error::dims(format!("columns of {name}"), 3, t.shape[1]));
        }
        Ok(d.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn faces(&self, name: &str) -> Result<Vec<[u32; 3]>> {
        let t = self.get(name)?;
        if t.shape.len() != 2 || t.shape[1] != 3 {
            return Err(Error::Invalid(format!("{name} is not an (F, 3) face table")));
        }
        Ok(t.u32s()?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SectionDescriptor {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: usize,
    byte_len: usize,
    crc32: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    metadata: serde_json::Value,
    sections: Vec<SectionDescriptor>,
}

/// Serializes `metadata` and `tensors` into the checksummed container.
pub fn encode(metadata: &serde_json::Value, tensors: &TensorMap) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut sections = Vec::with_capacity(tensors.0.len());
    for (name, t) in &tensors.0 {
        let bytes = t.to_bytes();
        sections.push(SectionDescriptor {
            name: name.clone(),
            dtype: t.dtype().to_string(),
            shape: t.shape.clone(),
            byte_offset: blob.len(),
            byte_len: bytes.len(),
            crc32: crc32fast::hash(&bytes),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = serde_json::to_vec(&Manifest {
        version: VERSION,
        metadata: metadata.clone(),
        sections,
    })?;
    let mut out = Vec::with_capacity(MAGIC.len() + 12 + manifest.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&manifest).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses a container, verifying magic, version and every checksum.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<(serde_json::Value, TensorMap)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        if bytes.len() >= 4 && &bytes[..4] == b"OMGA" {
            return Err(Error::Version {
                found: String::from_utf8_lossy(&bytes[..MAGIC.len().min(bytes.len())])
                    .trim()
                    .to_string(),
                expected: "OMGA1".into(),
            });
        }
        return Err(Error::BadMagic {
            path: origin.to_path_buf(),
            expected: "OMGA1".into(),
        });
    }
    let header_end = MAGIC.len() + 12;
    if bytes.len() < header_end {
        return Err(Error::Truncated {
            name: "header".into(),
            needed: header_end,
            available: bytes.len(),
        });
    }
    let len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
    let crc = u32::from_le_bytes(bytes[14..18].try_into().expect("4 bytes"));
    let manifest_end = header_end
        .checked_add(len)
        .ok_or_else(|| Error::Invalid("manifest length overflow".into()))?;
    if bytes.len() < manifest_end {
        return Err(Error::Truncated {
            name: "manifest".into(),
            needed: len,
            available: bytes.len() - header_end,
        });
    }
    let manifest_bytes = &bytes[header_end..manifest_end];
    if crc32fast::hash(manifest_bytes) != crc {
        return Err(Error::Checksum("manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(manifest_bytes)?;
    if manifest.version != VERSION {
        return Err(Error::Version {
            found: manifest.version.to_string(),
            expected: VERSION.to_string(),
        });
    }
    let blob = &bytes[manifest_end..];
    let mut tensors = TensorMap::new();
    for s in manifest.sections {
        let end = s.byte_offset.checked_add(s.byte_len).unwrap_or(usize::MAX);
        if end > blob.len() {
            return Err(Error::Truncated {
                name: s.name,
                needed: s.byte_len,
                available: blob.len().saturating_sub(s.byte_offset),
            });
        }
        let raw = &blob[s.byte_offset..end];
        if crc32fast::hash(raw) != s.crc32 {
            return Err(Error::Checksum(s.name));
        }
        let t = Tensor::from_bytes(&s.name, &s.dtype, s.shape, raw)?;
        tensors.insert(s.name, t);
    }
    Ok((manifest.metadata, tensors))
}

pub fn write(path: &Path, metadata: &serde_json::Value, tensors: &TensorMap) -> Result<()> {
    std::fs::write(path, encode(metadata, tensors)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(serde_json::Value, TensorMap)> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, path)
}
