//! NCOF: a named-array container.
//!
//! Layout: the magic bytes `NCOF1`, a little-endian `u32` header length, a
//! UTF-8 JSON header `{"arrays": [{name, dtype, shape}, ...], "meta": {...}}`,
//! then the raw little-endian array payloads in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 5] = b"NCOF1";

#[derive(Debug, Clone, PartialEq)]
pub enum NcofArray {
    F32(Tensor<f32>),
    I32(Tensor<i32>),
    U8(Tensor<u8>),
}

impl NcofArray {
    pub fn dtype(&self) -> &'static str {
        match self {
            NcofArray::F32(_) => "f32",
            NcofArray::I32(_) => "i32",
            NcofArray::U8(_) => "u8",
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            NcofArray::F32(t) => t.shape(),
            NcofArray::I32(t) => t.shape(),
            NcofArray::U8(t) => t.shape(),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            NcofArray::F32(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            NcofArray::I32(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            NcofArray::U8(t) => out.extend_from_slice(t.data()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arrays: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Named arrays in file order, plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ncof {
    pub arrays: Vec<(String, NcofArray)>,
    pub meta: serde_json::Value,
}

impl Ncof {
    pub fn get(&self, name: &str) -> Option<&NcofArray> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>, TrainError> {
        match self.get(name) {
            Some(NcofArray::F32(t)) => Ok(t),
            Some(other) => Err(TrainError::Format(format!("array {name:?} is {}, expected f32", other.dtype()))),
            None => Err(TrainError::MissingArray(name.to_string())),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let header = Header {
            arrays: self
                .arrays
                .iter()
                .map(|(name, a)| Entry { name: name.clone(), dtype: a.dtype().into(), shape: a.shape().to_vec() })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| TrainError::Format(e.to_string()))?;
        let len = u32::try_from(json.len()).map_err(|_| TrainError::Format("header too large".into()))?;
        let mut out = Vec::with_capacity(9 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in &self.arrays {
            a.write_payload(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        if bytes.len() < 9 || &bytes[..5] != MAGIC {
            return Err(TrainError::MagicMismatch);
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let body = &bytes[9..];
        if body.len() < len {
            return Err(TrainError::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| TrainError::Format(e.to_string()))?;
        let mut rest = &body[len..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let n = numel(&e.shape);
            let width = match e.dtype.as_str() {
                "f32" | "i32" => 4,
                "u8" => 1,
                other => return Err(TrainError::Format(format!("unknown dtype {other:?}"))),
            };
            let nbytes = n * width;
            if rest.len() < nbytes {
                return Err(TrainError::Format(format!("array {:?} truncated", e.name)));
            }
            let (raw, tail) = rest.split_at(nbytes);
            rest = tail;
            let words = raw.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).unwrap());
            let array = match e.dtype.as_str() {
                "f32" => NcofArray::F32(Tensor::new(e.shape, words.map(f32::from_le_bytes).collect())),
                "i32" => NcofArray::I32(Tensor::new(e.shape, words.map(i32::from_le_bytes).collect())),
                _ => NcofArray::U8(Tensor::new(e.shape, raw.to_vec())),
            };
            arrays.push((e.name, array));
        }
        if !rest.is_empty() {
            return Err(TrainError::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(Ncof { arrays, meta: header.meta })
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        let bytes = self.to_bytes()?;
        // write-then-rename keeps the previous file intact on failure
        let tmp = path.with_extension("ncof.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| TrainError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| TrainError::io(&tmp, e))?;
        f.sync_all().map_err(|e| TrainError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| TrainError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, TrainError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| TrainError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
