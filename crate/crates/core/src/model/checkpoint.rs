//! Binary checkpoint container.
//!
//! All integers are little-endian `u32`, all floats little-endian IEEE-754
//! `f64`, so a save/load round trip is bit-exact.
//!
//! ```text
//! magic          8 bytes  "OMCKPT\0\0"
//! version        u32      1
//! config_len     u32      byte length of the following UTF-8 TOML
//! config         bytes    TrainConfig used to produce the weights
//! tensor_count   u32      2 * (hidden layers + 2)
//! per tensor:
//!   ndim         u32
//!   dims         ndim x u32
//!   data         prod(dims) x f64, row-major
//! ```
//!
//! Tensor order: each extractor layer's weight then bias, the closed head,
//! then the one-vs-all head.

use std::fs;
use std::path::Path;

use super::ModelParams;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::config::TrainConfig;

const MAGIC: &[u8; 8] = b"OMCKPT\0\0";
const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams, config: &TrainConfig) -> Result<Vec<u8>> {
    let config_text = toml::to_string(config)
        .map_err(|e| Error::Checkpoint(format!("cannot serialize config: {e}")))?;
    let tensors = params.tensors();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, config_text.len() as u32);
    out.extend_from_slice(config_text.as_bytes());
    put_u32(&mut out, tensors.len() as u32);
    for t in tensors {
        put_u32(&mut out, t.ndim() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, TrainConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|e| Error::Checkpoint(format!("config is not UTF-8: {e}")))?;
    let config: TrainConfig = toml::from_str(config_text)
        .map_err(|e| Error::Checkpoint(format!("bad embedded config: {e}")))?;

    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((ModelParams::from_tensors(tensors)?, config))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, config: &TrainConfig) -> Result<()> {
    fs::write(path, encode_checkpoint(params, config)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, TrainConfig)> {
    decode_checkpoint(&fs::read(path)?)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
