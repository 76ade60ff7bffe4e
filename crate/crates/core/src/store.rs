//! `.dqt` tensor container and the in-memory [`TensorMap`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0..4      magic "DQTC"
//! 4..8      version (u32) = 1
//! 8..16     header length (u64)
//! 16..16+h  UTF-8 JSON header {"meta": {..}, "tensors": {name: entry}}
//! ...       zero padding up to the next multiple of 64
//! data      tensor payloads, each starting at a 64-byte aligned offset
//! ```
//!
//! Entry offsets are relative to the start of the data region. Tensors are
//! laid out and serialized in lexicographic name order, so saving the same
//! map twice produces identical files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 4] = b"DQTC";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

const PREAMBLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::U8 => "u8",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "u8" => Some(DType::U8),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Tensor payload. `U8` buffers are packed: the logical element count is the
/// product of the shape, while the byte length is whatever the packing needs.
#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::U8(a), TensorData::U8(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Self {
        Self { shape, data }
    }

    pub fn vector(values: Vec<f32>) -> Self {
        Self {
            shape: vec![values.len()],
            data: TensorData::F32(values),
        }
    }

    pub fn matrix(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: TensorData::F32(m.data().to_vec()),
        }
    }

    pub fn packed(shape: Vec<usize>, bytes: Vec<u8>) -> Self {
        Self {
            shape,
            data: TensorData::U8(bytes),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn nbytes(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len() * 4,
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    /// Interprets a rank-2 `f32` tensor as a matrix.
    pub fn to_matrix(&self, name: &str) -> Result<Matrix> {
        match (&self.data, self.shape.as_slice()) {
            (TensorData::F32(v), &[r, c]) => Matrix::from_vec(r, c, v.clone()),
            _ => Err(Error::InvalidTensor {
                name: name.to_string(),
                reason: format!("expected rank-2 f32, got {} {:?}", self.dtype(), self.shape),
            }),
        }
    }

    /// Checks the tensor invariants: rank 1 or 2 and, for `f32`, a buffer that
    /// matches the shape.
    pub fn validate(&self, name: &str) -> Result<()> {
        let invalid = |reason: String| Error::InvalidTensor {
            name: name.to_string(),
            reason,
        };
        if self.shape.is_empty() || self.shape.len() > 2 {
            return Err(invalid(format!("rank {} not in 1..=2", self.shape.len())));
        }
        if let TensorData::F32(v) = &self.data {
            if v.len() != self.elements() {
                return Err(invalid(format!(
                    "buffer holds {} values, shape {:?} needs {}",
                    v.len(),
                    self.shape,
                    self.elements()
                )));
            }
        }
        Ok(())
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U8(v) => v.clone(),
        }
    }
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.is_ascii() {
        return Err(Error::InvalidTensor {
            name: name.to_string(),
            reason: "names must be non-empty ASCII".into(),
        });
    }
    Ok(())
}

/// Named tensors plus string metadata; the representation of a checkpoint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    entries: BTreeMap<String, Tensor>,
    meta: BTreeMap<String, String>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        tensor.validate(&name)?;
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.require(name)?.to_matrix(name)
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f32>> {
        let t = self.require(name)?;
        match (t.as_f32(), t.shape()) {
            (Some(v), [_]) => Ok(v.to_vec()),
            _ => Err(Error::InvalidTensor {
                name: name.to_string(),
                reason: format!("expected rank-1 f32, got {} {:?}", t.dtype(), t.shape()),
            }),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    /// Module names `m` for every `m.weight` rank-2 tensor, in name order.
    pub fn weight_modules(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, t)| t.shape().len() == 2 && t.dtype() == DType::F32)
            .filter_map(|(k, _)| k.strip_suffix(".weight").map(str::to_string))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for (name, t) in &self.entries {
            validate_name(name)?;
            t.validate(name)?;
        }

        let mut table = BTreeMap::new();
        let mut cursor = 0usize;
        for (name, t) in &self.entries {
            let offset = align_up(cursor);
            let nbytes = t.nbytes();
            table.insert(
                name.as_str(),
                Entry {
                    dtype: t.dtype().as_str().to_string(),
                    shape: t.shape().to_vec(),
                    offset: offset as u64,
                    nbytes: nbytes as u64,
                    elements: (t.dtype() == DType::U8).then(|| t.elements() as u64),
                },
            );
            cursor = offset + nbytes;
        }

        let header = serde_json::to_vec(&HeaderOut {
            meta: &self.meta,
            tensors: table,
        })
        .map_err(|e| Error::Header(e.to_string()))?;

        let data_start = align_up(PREAMBLE + header.len());
        let mut out = Vec::with_capacity(data_start + cursor);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.resize(data_start, 0);
        for t in self.entries.values() {
            let offset = align_up(out.len() - data_start);
            out.resize(data_start + offset, 0);
            out.extend_from_slice(&t.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                return Err(Error::BadMagic);
            }
            return Err(Error::Truncated(format!(
                "file is {} bytes, shorter than the {PREAMBLE}-byte preamble",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = (PREAMBLE as u64)
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "header length {header_len} exceeds file size {}",
                    bytes.len()
                ))
            })? as usize;

        let header: HeaderIn = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| match e.to_string() {
                s if s.starts_with("duplicate tensor name ") => Error::DuplicateName(
                    s.trim_start_matches("duplicate tensor name ")
                        .split(" at line")
                        .next()
                        .unwrap_or_default()
                        .to_string(),
                ),
                s => Error::Header(s),
            })?;

        let data_start = align_up(header_end);
        let data_len = bytes.len().saturating_sub(data_start) as u64;

        let mut ranges: Vec<(u64, u64, &str)> = Vec::new();
        let mut map = TensorMap::new();
        map.meta = header.meta;
        for (name, e) in &header.tensors.0 {
            validate_name(name)?;
            let dtype = DType::parse(&e.dtype)
                .ok_or_else(|| Error::Header(format!("tensor `{name}`: unknown dtype {}", e.dtype)))?;
            if e.offset % ALIGN as u64 != 0 {
                return Err(Error::Header(format!(
                    "tensor `{name}`: offset {} is not {ALIGN}-byte aligned",
                    e.offset
                )));
            }
            let end = e.offset.checked_add(e.nbytes).ok_or_else(|| {
                Error::Truncated(format!("tensor `{name}`: offset + nbytes overflows"))
            })?;
            if end > data_len {
                return Err(Error::Truncated(format!(
                    "tensor `{name}` spans data bytes {}..{end}, data region holds {data_len}",
                    e.offset
                )));
            }
            let elements: u64 = e.shape.iter().map(|&d| d as u64).product();
            let raw = &bytes[data_start + e.offset as usize..data_start + end as usize];
            let data = match dtype {
                DType::F32 => {
                    if e.nbytes != elements * 4 {
                        return Err(Error::Header(format!(
                            "tensor `{name}`: nbytes {} does not match shape {:?}",
                            e.nbytes, e.shape
                        )));
                    }
                    TensorData::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                DType::U8 => {
                    if e.elements != Some(elements) {
                        return Err(Error::Header(format!(
                            "tensor `{name}`: packed element count {:?} does not match shape {:?}",
                            e.elements, e.shape
                        )));
                    }
                    TensorData::U8(raw.to_vec())
                }
            };
            ranges.push((e.offset, end, name));
            map.insert(name.clone(), Tensor::new(e.shape.clone(), data))?;
        }

        ranges.sort();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Overlap(format!(
                    "tensors `{}` and `{}` share bytes",
                    w[0].2, w[1].2
                )));
            }
        }
        Ok(map)
    }
}

/// Writes `map` to `path` in the `.dqt` format.
pub fn save_container(map: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = map.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_container(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorMap::from_bytes(&bytes)
}

/// Succeeds iff both maps hold the same names, shapes and dtypes. The error
/// names the first mismatch in name order.
pub fn check_compatible(a: &TensorMap, b: &TensorMap) -> Result<()> {
    for (name, ta) in a.iter() {
        let tb = b
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        if ta.dtype() != tb.dtype() {
            return Err(Error::DTypeMismatch {
                name: name.to_string(),
                left: ta.dtype().as_str(),
                right: tb.dtype().as_str(),
            });
        }
    }
    if let Some(extra) = b.names().find(|n| a.get(n).is_none()) {
        return Err(Error::MissingTensor(extra.to_string()));
    }
    Ok(())
}

#[inline]
fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    elements: Option<u64>,
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    meta: &'a BTreeMap<String, String>,
    tensors: BTreeMap<&'a str, Entry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderIn {
    #[serde(default)]
    meta: BTreeMap<String, String>,
    tensors: TensorTable,
}

/// Tensor table that rejects duplicate keys instead of silently keeping the last.
struct TensorTable(Vec<(String, Entry)>);

impl<'de> Deserialize<'de> for TensorTable {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        struct TableVisitor;

        impl<'de> Visitor<'de> for TableVisitor {
            type Value = TensorTable;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<TensorTable, A::Error> {
                let mut seen = std::collections::BTreeSet::new();
                let mut out = Vec::new();
                while let Some((name, entry)) = access.next_entry::<String, Entry>()? {
                    if !seen.insert(name.clone()) {
                        return Err(serde::de::Error::custom(format!(
                            "duplicate tensor name {name}"
                        )));
                    }
                    out.push((name, entry));
                }
                Ok(TensorTable(out))
            }
        }

        de.deserialize_map(TableVisitor)
    }
}
