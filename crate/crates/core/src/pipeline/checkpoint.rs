//! Binary checkpoint container: a header, a JSON metadata block, named typed
//! arrays and a SHA-256 trailer over everything before it.
//!
//! Layout (little endian):
//! `magic[8] version:u32 stage:u8 config_hash[32] meta_len:u32 meta
//!  n_arrays:u32 { name_len:u16 name kind:u8 ndim:u8 dims:u64* count:u64 data }*
//!  sha256[32]`

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::io::write_atomic;

pub const MAGIC: &[u8; 8] = b"DXMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch (file corrupt or truncated)")]
    Checksum,
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
    #[error("array `{name}`: expected {expected} values, found {got}")]
    Shape { name: String, expected: usize, got: usize },
    #[error("array `{0}` missing from checkpoint")]
    Missing(String),
    #[error("checkpoint was written for config {found}, current config is {expected}")]
    ConfigMismatch { found: String, expected: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which pipeline stage produced the checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Base,
    Experts,
    Gate,
}

impl Stage {
    fn code(self) -> u8 {
        match self {
            Stage::Init => 0,
            Stage::Base => 1,
            Stage::Experts => 2,
            Stage::Gate => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [Stage::Init, Stage::Base, Stage::Experts, Stage::Gate].into_iter().find(|s| s.code() == c)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Init => "init",
            Stage::Base => "base",
            Stage::Experts => "experts",
            Stage::Gate => "gate",
        })
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "init" => Ok(Stage::Init),
            "base" => Ok(Stage::Base),
            "experts" => Ok(Stage::Experts),
            "gate" => Ok(Stage::Gate),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl ArrayData {
    fn kind(&self) -> u8 {
        match self {
            ArrayData::F64(_) => 0,
            ArrayData::U64(_) => 1,
            ArrayData::Bytes(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
            ArrayData::Bytes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<u64>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config_hash: [u8; 32],
    pub meta: Value,
    pub arrays: BTreeMap<String, NamedArray>,
}

impl Checkpoint {
    pub fn new(stage: Stage, config_hash: [u8; 32], meta: Value) -> Self {
        Self { stage, config_hash, meta, arrays: BTreeMap::new() }
    }

    pub fn put_f64(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        self.put(name, shape, ArrayData::F64(data));
    }

    pub fn put_u64(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<u64>) {
        self.put(name, shape, ArrayData::U64(data));
    }

    pub fn put_bytes(&mut self, name: impl Into<String>, data: Vec<u8>) {
        let n = data.len();
        self.put(name, &[n], ArrayData::Bytes(data));
    }

    fn put(&mut self, name: impl Into<String>, shape: &[usize], data: ArrayData) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.insert(name.into(), NamedArray { shape: shape.iter().map(|&d| d as u64).collect(), data });
    }

    fn get(&self, name: &str) -> Result<&ArrayData, CheckpointError> {
        self.arrays.get(name).map(|a| &a.data).ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    fn wrong_kind(name: &str) -> CheckpointError {
        CheckpointError::Malformed(format!("array `{name}` has the wrong element type"))
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64], CheckpointError> {
        match self.get(name)? {
            ArrayData::F64(v) => Ok(v),
            _ => Err(Self::wrong_kind(name)),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64], CheckpointError> {
        match self.get(name)? {
            ArrayData::U64(v) => Ok(v),
            _ => Err(Self::wrong_kind(name)),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8], CheckpointError> {
        match self.get(name)? {
            ArrayData::Bytes(v) => Ok(v),
            _ => Err(Self::wrong_kind(name)),
        }
    }

    /// `f64s` with a length check.
    pub fn f64s_len(&self, name: &str, expected: usize) -> Result<&[f64], CheckpointError> {
        let v = self.f64s(name)?;
        if v.len() != expected {
            return Err(CheckpointError::Shape { name: name.to_string(), expected, got: v.len() });
        }
        Ok(v)
    }

    pub fn u64s_len(&self, name: &str, expected: usize) -> Result<&[u64], CheckpointError> {
        let v = self.u64s(name)?;
        if v.len() != expected {
            return Err(CheckpointError::Shape { name: name.to_string(), expected, got: v.len() });
        }
        Ok(v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.stage.code());
        out.extend_from_slice(&self.config_hash);
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(a.data.kind());
            out.push(a.shape.len() as u8);
            for d in &a.shape {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&(a.data.len() as u64).to_le_bytes());
            match &a.data {
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::Bytes(v) => out.extend_from_slice(v),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(CheckpointError::Checksum);
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            // Report a version mismatch ahead of the checksum when the header says so.
            let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
            if version != VERSION {
                return Err(CheckpointError::Version { found: version, expected: VERSION });
            }
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, expected: VERSION });
        }
        let stage_code = r.take(1)?[0];
        let stage =
            Stage::from_code(stage_code).ok_or_else(|| CheckpointError::Malformed(format!("stage code {stage_code}")))?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let meta_len = r.u32()? as usize;
        let meta: Value =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let n = r.u32()? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..n {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("array name is not UTF-8".into()))?;
            let kind = r.take(1)?[0];
            let ndim = r.take(1)?[0] as usize;
            let shape: Vec<u64> = (0..ndim).map(|_| r.u64()).collect::<Result<_, _>>()?;
            let count = r.u64()? as usize;
            if shape.iter().product::<u64>() as usize != count {
                return Err(CheckpointError::Malformed(format!("array `{name}` shape does not match its length")));
            }
            let data = match kind {
                0 => ArrayData::F64(
                    r.take(count.checked_mul(8).ok_or(CheckpointError::Checksum)?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => ArrayData::U64(
                    r.take(count.checked_mul(8).ok_or(CheckpointError::Checksum)?)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => ArrayData::Bytes(r.take(count)?.to_vec()),
                k => return Err(CheckpointError::Malformed(format!("array `{name}` has unknown kind {k}"))),
            };
            arrays.insert(name, NamedArray { shape, data });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes after the last array".into()));
        }
        Ok(Self { stage, config_hash, meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
