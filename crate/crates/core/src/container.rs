//! EKC1 named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EKC1"                      4 bytes magic
//! header_len: u32             length of the JSON header in bytes
//! header: UTF-8 JSON          {"tensors":[{name,dtype,shape,byte_offset}...],"metadata":{...}}
//!                             right-padded with ASCII spaces so the payload starts on an
//!                             8-byte boundary
//! payload                     row-major tensor data; every `byte_offset` is relative to the
//!                             payload start and a multiple of 8, gaps are zero bytes
//! ```
//!
//! Supported dtypes are `f32`, `f64`, `i64` and `u8`. There is no trailing padding after the
//! last tensor, so a lone 2x3 `f32` tensor has a payload of exactly 24 bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"EKC1";
pub const ALIGNMENT: usize = 8;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: expected \"EKC1\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("unknown dtype `{0}`")]
    UnknownDtype(String),
    #[error("header is not valid JSON: {0}")]
    HeaderJson(#[source] serde_json::Error),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{name}`: shape {shape:?} holds {expected} elements but payload has {actual}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has dtype {found}, expected {expected}")]
    WrongDtype {
        name: String,
        expected: Dtype,
        found: Dtype,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    I64,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
            Dtype::U8 => 1,
        }
    }

    fn parse(s: &str) -> Result<Self, ContainerError> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            "i64" => Ok(Dtype::I64),
            "u8" => Ok(Dtype::U8),
            other => Err(ContainerError::UnknownDtype(other.to_string())),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
            Dtype::I64 => "i64",
            Dtype::U8 => "u8",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::I64(_) => Dtype::I64,
            TensorData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }

    fn read_le(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::I64 => TensorData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::U8 => TensorData::U8(bytes.to_vec()),
        }
    }
}

/// A shaped, row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, ContainerError> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(ContainerError::ShapeMismatch {
                name: String::new(),
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, ContainerError> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, ContainerError> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn i64(shape: Vec<usize>, data: Vec<i64>) -> Result<Self, ContainerError> {
        Self::new(shape, TensorData::I64(data))
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self, ContainerError> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * self.dtype().size()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: BTreeMap<String, Value>,
}

/// Named tensors in insertion order plus free-form JSON metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    tensors: Vec<(String, Tensor)>,
    metadata: BTreeMap<String, Value>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), ContainerError> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(ContainerError::DuplicateName(name));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.get(name)
            .ok_or_else(|| ContainerError::MissingTensor(name.to_string()))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, Value> {
        &self.metadata
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<Value>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&Value> {
        self.metadata.get(key)
    }

    pub fn f32_tensor(&self, name: &str) -> Result<(&[usize], &[f32]), ContainerError> {
        let t = self.tensor(name)?;
        match t.data() {
            TensorData::F32(v) => Ok((t.shape(), v)),
            other => Err(wrong(name, Dtype::F32, other.dtype())),
        }
    }

    pub fn f64_tensor(&self, name: &str) -> Result<(&[usize], &[f64]), ContainerError> {
        let t = self.tensor(name)?;
        match t.data() {
            TensorData::F64(v) => Ok((t.shape(), v)),
            other => Err(wrong(name, Dtype::F64, other.dtype())),
        }
    }

    pub fn i64_tensor(&self, name: &str) -> Result<(&[usize], &[i64]), ContainerError> {
        let t = self.tensor(name)?;
        match t.data() {
            TensorData::I64(v) => Ok((t.shape(), v)),
            other => Err(wrong(name, Dtype::I64, other.dtype())),
        }
    }

    pub fn u8_tensor(&self, name: &str) -> Result<(&[usize], &[u8]), ContainerError> {
        let t = self.tensor(name)?;
        match t.data() {
            TensorData::U8(v) => Ok((t.shape(), v)),
            other => Err(wrong(name, Dtype::U8, other.dtype())),
        }
    }

    /// Serializes to the exact on-disk byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            offset = align_up(offset);
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: t.dtype().to_string(),
                shape: t.shape.clone(),
                byte_offset: offset,
            });
            offset += t.byte_len();
        }
        let header = Header {
            tensors: entries,
            metadata: self.metadata.clone(),
        };
        let mut json = serde_json::to_vec(&header).expect("header serialization cannot fail");
        while !(MAGIC.len() + 4 + json.len()).is_multiple_of(ALIGNMENT) {
            json.push(b' ');
        }

        let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let payload_start = out.len();
        for ((_, t), entry) in self.tensors.iter().zip(&header.tensors) {
            out.resize(payload_start + entry.byte_offset, 0);
            t.data.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < 4 {
            return Err(ContainerError::Truncated("file shorter than magic".into()));
        }
        let found: [u8; 4] = bytes[..4].try_into().unwrap();
        if &found != MAGIC {
            return Err(ContainerError::BadMagic { found });
        }
        if bytes.len() < 8 {
            return Err(ContainerError::Truncated("missing header length".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let payload_start = 8 + header_len;
        if bytes.len() < payload_start {
            return Err(ContainerError::Truncated(format!(
                "header declares {header_len} bytes, only {} available",
                bytes.len() - 8
            )));
        }
        let header: Header =
            serde_json::from_slice(&bytes[8..payload_start]).map_err(ContainerError::HeaderJson)?;
        let payload = &bytes[payload_start..];

        let mut container = Container {
            tensors: Vec::with_capacity(header.tensors.len()),
            metadata: header.metadata,
        };
        for entry in header.tensors {
            let dtype = Dtype::parse(&entry.dtype)?;
            let count = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| {
                    ContainerError::Truncated(format!("tensor `{}` size overflows", entry.name))
                })?;
            let end = entry.byte_offset.saturating_add(count);
            if end > payload.len() {
                return Err(ContainerError::Truncated(format!(
                    "tensor `{}` needs payload bytes {}..{end}, payload has {}",
                    entry.name,
                    entry.byte_offset,
                    payload.len()
                )));
            }
            let data = TensorData::read_le(dtype, &payload[entry.byte_offset..end]);
            let tensor = Tensor::new(entry.shape, data).map_err(|e| rename(e, &entry.name))?;
            container.insert(entry.name, tensor)?;
        }
        Ok(container)
    }
}

fn wrong(name: &str, expected: Dtype, found: Dtype) -> ContainerError {
    ContainerError::WrongDtype {
        name: name.to_string(),
        expected,
        found,
    }
}

fn rename(e: ContainerError, name: &str) -> ContainerError {
    match e {
        ContainerError::ShapeMismatch {
            shape,
            expected,
            actual,
            ..
        } => ContainerError::ShapeMismatch {
            name: name.to_string(),
            shape,
            expected,
            actual,
        },
        other => other,
    }
}

fn align_up(offset: usize) -> usize {
    offset.div_ceil(ALIGNMENT) * ALIGNMENT
}

/// Writes `container` to `path` via a temporary sibling file and a rename.
pub fn write_container(container: &Container, path: impl AsRef<Path>) -> Result<(), ContainerError> {
    let path = path.as_ref();
    let io_err = |source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    };
    let bytes = container.to_bytes();
    let tmp = tmp_path(path);
    let mut file = fs::File::create(&tmp).map_err(io_err)?;
    file.write_all(&bytes).map_err(io_err)?;
    file.sync_all().map_err(io_err)?;
    drop(file);
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container, ContainerError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Container::from_bytes(&bytes)
}

pub(crate) fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zeros_2x3() -> Container {
        let mut c = Container::new();
        c.insert("w", Tensor::f32(vec![2, 3], vec![0.0; 6]).unwrap())
            .unwrap();
        c
    }

    #[test]
    fn zero_tensor_payload_is_24_zero_bytes() {
        let bytes = zeros_2x3().to_bytes();
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let payload = &bytes[8 + header_len..];
        assert_eq!(payload, &[0u8; 24]);
    }

    #[test]
    fn golden_bytes() {
        let mut c = Container::new();
        c.insert("a", Tensor::u8(vec![3], vec![1, 2, 3]).unwrap())
            .unwrap();
        c.insert("b", Tensor::i64(vec![1], vec![-2]).unwrap())
            .unwrap();
        let bytes = c.to_bytes();
        let header = br#"{"tensors":[{"name":"a","dtype":"u8","shape":[3],"byte_offset":0},{"name":"b","dtype":"i64","shape":[1],"byte_offset":8}],"metadata":{}}"#;
        // 8 + 136 is already a multiple of 8, so no padding
        assert_eq!(header.len(), 136);
        let mut expected = Vec::new();
        expected.extend_from_slice(b"EKC1");
        expected.extend_from_slice(&136u32.to_le_bytes());
        expected.extend_from_slice(header);
        expected.extend_from_slice(&[1, 2, 3, 0, 0, 0, 0, 0]);
        expected.extend_from_slice(&(-2i64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn offsets_are_aligned_for_large_embedding() {
        let mut c = Container::new();
        c.insert("mask", Tensor::u8(vec![5], vec![1; 5]).unwrap())
            .unwrap();
        c.insert("emb", Tensor::f32(vec![5174, 768], vec![0.0; 5174 * 768]).unwrap())
            .unwrap();
        let bytes = c.to_bytes();
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        assert_eq!((8 + header_len) % 8, 0);
        let header: Header = serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
        assert_eq!(header.tensors[1].name, "emb");
        assert_eq!(header.tensors[1].shape, vec![5174, 768]);
        assert_eq!(header.tensors[1].byte_offset, 8);
        assert_eq!(bytes.len(), 8 + header_len + 8 + 5174 * 768 * 4);
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = zeros_2x3().to_bytes();
        bytes[..4].copy_from_slice(b"XXC1");
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(ContainerError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let bytes = zeros_2x3().to_bytes();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(
            Container::from_bytes(cut),
            Err(ContainerError::Truncated(_))
        ));
        assert!(matches!(
            Container::from_bytes(&bytes[..6]),
            Err(ContainerError::Truncated(_))
        ));
    }

    #[test]
    fn unknown_dtype_and_bad_json() {
        let bytes = zeros_2x3().to_bytes();
        let text = String::from_utf8_lossy(&bytes).replace("\"f32\"", "\"f16\"");
        assert!(matches!(
            Container::from_bytes(text.as_bytes()),
            Err(ContainerError::UnknownDtype(d)) if d == "f16"
        ));

        let mut broken = bytes.clone();
        broken[8] = b'[';
        assert!(matches!(
            Container::from_bytes(&broken),
            Err(ContainerError::HeaderJson(_))
        ));
    }

    #[test]
    fn duplicate_and_shape_errors() {
        let mut c = zeros_2x3();
        let err = c
            .insert("w", Tensor::f32(vec![1], vec![1.0]).unwrap())
            .unwrap_err();
        assert!(matches!(err, ContainerError::DuplicateName(_)));
        assert!(matches!(
            Tensor::f64(vec![2, 2], vec![1.0; 3]),
            Err(ContainerError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn file_round_trip_and_unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ekc");
        let mut c = zeros_2x3();
        c.set_meta("kind", "test");
        write_container(&c, &path).unwrap();
        assert_eq!(read_container(&path).unwrap(), c);

        let bad = dir.path().join("missing").join("x.ekc");
        assert!(matches!(
            write_container(&c, &bad),
            Err(ContainerError::Io { .. })
        ));
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        let shape = prop::collection::vec(0usize..5, 0..4);
        shape.prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop_oneof![
                prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n)
                    .prop_map(TensorData::F32),
                prop::collection::vec(any::<u64>().prop_map(f64::from_bits), n)
                    .prop_map(TensorData::F64),
                prop::collection::vec(any::<i64>(), n).prop_map(TensorData::I64),
                prop::collection::vec(any::<u8>(), n).prop_map(TensorData::U8),
            ]
            .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
        })
    }

    fn bits(t: &Tensor) -> Vec<u8> {
        let mut out = Vec::new();
        t.data.write_le(&mut out);
        out
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise_lossless(tensors in prop::collection::vec(arb_tensor(), 0..5)) {
            let mut c = Container::new();
            for (i, t) in tensors.iter().enumerate() {
                c.insert(format!("t{i}"), t.clone()).unwrap();
            }
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for (i, t) in tensors.iter().enumerate() {
                let r = back.tensor(&format!("t{i}")).unwrap();
                prop_assert_eq!(r.shape(), t.shape());
                prop_assert_eq!(r.dtype(), t.dtype());
                prop_assert_eq!(bits(r), bits(t));
            }
        }
    }
}
