//! Little-endian binary checkpoints.
//!
//! Layout: magic `BIOPM1`, `u16` format version, `u64` config hash, `u64`
//! seed, `u32` tensor count, then per tensor a `u16` name length, the UTF-8
//! name, a `u8` rank, `u32` dims and `f32` data in row-major order. A trailing
//! `u64` holds the optimizer step.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::formats::{Header, FORMAT_VERSION};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"BIOPM1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: u64,
    pub header: Header,
}

pub fn encode_checkpoint(params: &ModelParams, step: u64, header: Header) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header.config_hash.to_le_bytes());
    out.extend_from_slice(&header.seed.to_le_bytes());
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&step.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint whose tensors must match the shapes implied by `config`.
pub fn decode_checkpoint(bytes: &[u8], config: ModelConfig) -> Result<Checkpoint> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("checkpoint version {version} unsupported")));
    }
    let header = Header {
        config_hash: cur.u64()?,
        seed: cur.u64()?,
    };
    let mut params = ModelParams::zeros(config);
    let count = cur.u32()? as usize;
    let mut slots = params.tensors_mut();
    if count != slots.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} tensors, model expects {}",
            slots.len()
        )));
    }
    for (expected, slot) in slots.iter_mut() {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if name != expected {
            return Err(Error::Format(format!("expected tensor {expected}, found {name}")));
        }
        let rank = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()? as usize);
        }
        if dims != slot.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {dims:?}, model expects {:?}",
                slot.shape()
            )));
        }
        for v in slot.iter_mut() {
            *v = f32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as f64;
        }
    }
    drop(slots);
    let step = cur.u64()?;
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { params, step, header })
}

pub fn write_checkpoint(path: &Path, params: &ModelParams, step: u64, header: Header) -> Result<()> {
    let bytes = encode_checkpoint(params, step, header);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path, config: ModelConfig) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, config)
}
