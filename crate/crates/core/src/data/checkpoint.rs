//! Versioned binary parameter checkpoints.
//!
//! Layout: `"SADC"`, version byte, u32 parameter count, then per parameter
//! a u16 name length, the UTF-8 name, a u8 rank, rank × u32 dims and the
//! f32 payload. Eight bytes of FNV-1a-64 over everything before it close
//! the file. All integers and floats are little-endian.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use thiserror::Error;

use crate::error::{Error as CrateError, Result};
use crate::networks::ParameterSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SADC";
pub const VERSION: u8 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:02x?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u8 },
    #[error("digest mismatch: stored {stored:016x}, computed {computed:016x}")]
    Digest { stored: u64, computed: u64 },
    #[error("truncated checkpoint at offset {offset}: need {need} more bytes for {what}")]
    Truncated {
        offset: usize,
        need: usize,
        what: &'static str,
    },
    #[error("malformed checkpoint at offset {offset}: {detail}")]
    Malformed { offset: usize, detail: String },
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn encode(params: &ParameterSet<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.element_count() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = fnv1a(&out);
    out.extend_from_slice(&digest.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let avail = self.bytes.len() - self.pos;
        if avail < n {
            return Err(CheckpointError::Truncated {
                offset: self.bytes.len(),
                need: n - avail,
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParameterSet<f32>, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
    }
    if bytes.len() < 5 + 8 {
        return Err(CheckpointError::Truncated {
            offset: bytes.len(),
            need: 13 - bytes.len(),
            what: "header and digest",
        });
    }
    if bytes[4] != VERSION {
        return Err(CheckpointError::Version { found: bytes[4] });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = fnv1a(body);
    if stored != computed {
        return Err(CheckpointError::Digest { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 5 };
    let count = r.u32("parameter count")?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| CheckpointError::Malformed {
                offset: at + 2,
                detail: format!("name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = r.take(numel * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let malformed = |e: CrateError| CheckpointError::Malformed {
            offset: at,
            detail: format!("parameter '{name}': {e}"),
        };
        let t = Tensor::new(dims, data).map_err(malformed)?;
        params.insert(name.clone(), t).map_err(malformed)?;
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed {
            offset: r.pos,
            detail: format!("{} unexpected bytes before the digest", body.len() - r.pos),
        });
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ParameterSet<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| CrateError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterSet<f32>> {
    let bytes = std::fs::read(path).map_err(|e| CrateError::io(path, e))?;
    Ok(decode(&bytes)?)
}
