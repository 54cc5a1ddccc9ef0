//! Shared checkpoint byte format.
//!
//! Layout: magic `SPTX1`, one version byte, a little-endian u32 entry count,
//! then per entry: u16 name length + UTF-8 name, dtype code (0 = f32), rank
//! byte, u32 dims, and the little-endian f32 payload. Round-trips bit-exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"SPTX1";
pub const FORMAT_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(entries: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for entry in entries {
        let name = entry.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(DTYPE_F32);
        out.push(entry.shape.len() as u8);
        for &d in &entry.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &entry.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corruption {
                offset: self.pos,
                detail: format!(
                    "need {n} bytes, only {} remain of {}",
                    self.bytes.len() - self.pos,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, detail: format!("bad magic {magic:?}") });
    }
    let version = cur.u8()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: MAGIC.len(),
            detail: format!("unsupported version {version}"),
        });
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name_offset = cur.pos;
        let name = core::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Format {
                offset: name_offset,
                detail: format!("tensor name is not UTF-8: {e}"),
            })?
            .into();
        let dtype_offset = cur.pos;
        let dtype = cur.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format {
                offset: dtype_offset,
                detail: format!("unknown dtype code {dtype}"),
            });
        }
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = cur.take(numel * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(NamedTensor { name, shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos,
            detail: format!("{} trailing bytes after last entry", bytes.len() - cur.pos),
        });
    }
    Ok(entries)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
