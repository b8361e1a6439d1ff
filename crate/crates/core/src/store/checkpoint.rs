//! Versioned binary checkpoints.
//!
//! Layout: magic `CFCK`, format version, strategy tag, config hash, the
//! canonical config text, a tensor manifest (name, dtype, shape, byte offset)
//! and finally the little-endian f32 payload.

use std::path::Path;

use super::{atomic_write, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::fusion::StrategyTag;
use crate::harness::train::config_hash;
use crate::models::{ParameterSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub strategy: StrategyTag,
    pub config_text: String,
    pub params: ParameterSet<f32>,
}

impl Checkpoint {
    pub fn config_hash(&self) -> u64 {
        config_hash(&self.config_text)
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(ck.strategy.as_str());
    w.u64(ck.config_hash());
    w.str(&ck.config_text);
    w.u32(ck.params.len() as u32);
    let mut offset = 0u64;
    for (name, t) in ck.params.iter() {
        w.str(name);
        w.u8(DTYPE_F32);
        w.u32(t.shape.len() as u32);
        for &d in &t.shape {
            w.u64(d as u64);
        }
        w.u64(offset);
        offset += 4 * t.numel() as u64;
    }
    w.u64(offset);
    for (_, t) in ck.params.iter() {
        for &v in &t.data {
            w.f32(v);
        }
    }
    w.into_inner()
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    atomic_write(path, &encode_checkpoint(ck))
}

/// Decodes a checkpoint, verifying the config hash and, when `expected` is
/// given, the strategy tag.
pub fn decode_checkpoint(path: &Path, bytes: &[u8], expected: Option<StrategyTag>) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let mut r = ByteReader::new(path, &bytes[4..]);
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let tag_str = r.str()?;
    let strategy: StrategyTag = tag_str
        .parse()
        .map_err(|_| r.corrupt(format!("unknown strategy tag `{tag_str}`")))?;
    if let Some(want) = expected {
        if want != strategy {
            return Err(Error::StrategyMismatch {
                expected: want.as_str().into(),
                found: strategy.as_str().into(),
            });
        }
    }
    let stored = r.u64()?;
    let config_text = r.str()?;
    let computed = config_hash(&config_text);
    if stored != computed {
        return Err(Error::HashMismatch { stored, computed });
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    let mut expected_offset = 0u64;
    for _ in 0..count {
        let name = r.str()?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(r.corrupt(format!("tensor `{name}` has unknown dtype {dtype}")));
        }
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(r.corrupt(format!("tensor `{name}` has {ndim} dimensions")));
        }
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()?;
        if offset != expected_offset {
            return Err(r.corrupt(format!("tensor `{name}` offset {offset}, expected {expected_offset}")));
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(numel) = numel else {
            return Err(r.corrupt(format!("tensor `{name}` shape overflows")));
        };
        expected_offset += 4 * numel as u64;
        entries.push((name, shape, numel));
    }
    let payload = r.u64()?;
    if payload != expected_offset {
        return Err(r.corrupt(format!("payload length {payload}, manifest implies {expected_offset}")));
    }
    let mut params = ParameterSet::new();
    for (name, shape, numel) in entries {
        let raw = r.bytes(numel * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk"))).collect();
        params.insert(&name, Tensor { shape, data })?;
    }
    if !r.is_empty() {
        return Err(r.corrupt("trailing bytes after payload".into()));
    }
    Ok(Checkpoint {
        strategy,
        config_text,
        params,
    })
}

pub fn load_checkpoint(path: &Path, expected: Option<StrategyTag>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes, expected)
}
