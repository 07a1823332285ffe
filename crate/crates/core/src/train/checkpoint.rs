//! `TKPZ` checkpoint files.
//!
//! Layout (all integers little-endian): magic `TKPZ`, version `u32`, entry
//! count `u32`, then per entry a `u16` name length, the UTF-8 name, a `u8`
//! rank, `rank` dims as `u32`, and the `f32` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TKPZ";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("entry name is not UTF-8")]
    Utf8,
    #[error("duplicate entry {0}")]
    Duplicate(String),
    #[error("missing entry {0}")]
    Missing(String),
    #[error("entry {0} is malformed")]
    Malformed(String),
    #[error("trailing bytes after last entry")]
    Trailing,
    #[error("io error on {0}: {1}")]
    Io(String, String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<(), CheckpointError> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(CheckpointError::Duplicate(name));
        }
        if shape.iter().product::<usize>() != data.len() || shape.len() > u8::MAX as usize || name.len() > u16::MAX as usize {
            return Err(CheckpointError::Malformed(name));
        }
        self.entries.push(Entry { name, shape: shape.to_vec(), data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Entry, CheckpointError> {
        self.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let n = r.u32()? as usize;
        let mut ck = Checkpoint::default();
        for _ in 0..n {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| CheckpointError::Utf8)?.to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            ck.push(name, &shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing);
        }
        Ok(ck)
    }

    /// Write to a sibling temp file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |e: std::io::Error| CheckpointError::Io(path.display().to_string(), e.to_string());
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(io)?;
            f.write_all(&self.encode()).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io(path.display().to_string(), e.to_string()))?;
        Self::decode(&bytes)
    }

    /// Store bytes one per float (exact for `0..=255`).
    pub fn push_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CheckpointError> {
        self.push(name, &[bytes.len()], bytes.iter().map(|&b| b as f32).collect())
    }

    pub fn bytes(&self, name: &str) -> Result<Vec<u8>, CheckpointError> {
        let e = self.require(name)?;
        e.data
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(CheckpointError::Malformed(name.to_string()))
                }
            })
            .collect()
    }

    /// Store a `u64` as four 16-bit pieces, each exact in `f32`.
    pub fn push_u64(&mut self, name: &str, v: u64) -> Result<(), CheckpointError> {
        let parts = (0..4).map(|i| ((v >> (48 - 16 * i)) & 0xFFFF) as f32).collect();
        self.push(name, &[4], parts)
    }

    pub fn u64(&self, name: &str) -> Result<u64, CheckpointError> {
        let e = self.require(name)?;
        if e.data.len() != 4 {
            return Err(CheckpointError::Malformed(name.to_string()));
        }
        let mut v = 0u64;
        for &p in &e.data {
            if !(0.0..=65535.0).contains(&p) || p.fract() != 0.0 {
                return Err(CheckpointError::Malformed(name.to_string()));
            }
            v = (v << 16) | p as u64;
        }
        Ok(v)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
