//! Checkpoint files.
//!
//! ```text
//! "SCKP" | u32 version (1) | u32 header_len | header JSON (model, train, step)
//! u32 tensor_count
//! per tensor: u32 name_len | name | u8 dtype (1 = f64) | u32 rank | rank x u32 dims | data (LE)
//! u32 CRC32 of all preceding bytes
//! ```
//! Files are written to a temporary sibling and renamed into place.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::schedule::TrainConfig;
use super::{ModelConfig, ModelParams};

pub const MAGIC: [u8; 4] = *b"SCKP";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: usize,
}

pub fn encode_checkpoint(header: &CheckpointHeader, params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(header).expect("header serializes");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ModelParams), CheckpointError> {
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated);
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
        return Err(CheckpointError::Checksum);
    }
    let mut c = Cursor { buf: body, pos: 4 };
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let hlen = c.u32()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(c.take(hlen)?).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    header.model.validate().map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let mut params = ModelParams::zeros(&header.model);
    let count = c.u32()? as usize;
    let mut slots = params.tensors_mut();
    if count != slots.len() {
        return Err(CheckpointError::Malformed(format!("{count} tensors, config needs {}", slots.len())));
    }
    for slot in slots.iter_mut() {
        let nlen = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?).map_err(|_| CheckpointError::Malformed("tensor name".into()))?;
        if name != slot.name {
            return Err(CheckpointError::Malformed(format!("expected tensor {}, found {name}", slot.name)));
        }
        let dtype = c.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(CheckpointError::Malformed(format!("{name}: dtype {dtype}")));
        }
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if dims != slot.shape {
            return Err(CheckpointError::Malformed(format!("{name}: shape {dims:?}, expected {:?}", slot.shape)));
        }
        let raw = c.take(slot.data.len() * 8)?;
        for (dst, chunk) in slot.data.iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    drop(slots);
    if c.pos != body.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok((header, params))
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, params: &ModelParams) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, encode_checkpoint(header, params)).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelParams), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
