//! Binary model checkpoints.
//!
//! Layout (little endian): magic `XBF1`, `u32` version, `u32` length + JSON model
//! config, `u32` parameter count, then per parameter `u32` name length, UTF-8 name,
//! `u32` rows, `u32` cols and `rows * cols` `f64` values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::network::{ModelConfig, XBoundFormer};

pub const MAGIC: &[u8; 4] = b"XBF1";
pub const VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Matrix)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(model: &XBoundFormer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(&config);
    put_u32(&mut out, model.params.len())?;
    for (_, name, value) in model.params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, value.nrows())?;
        put_u32(&mut out, value.ncols())?;
        for v in value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("missing XBF1 header".into()));
    }
    let version = cur.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = cur.u32()?;
    let config: ModelConfig =
        serde_json::from_slice(cur.take(len)?).map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
    let count = cur.u32()?;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rows = cur.u32()?;
        let cols = cur.u32()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?;
        let raw = cur.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let value = Matrix::from_shape_vec((rows, cols), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        params.push((name, value));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing data".into()));
    }
    Ok(Checkpoint { config, params })
}

pub fn save(model: &XBoundFormer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model)?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

impl Checkpoint {
    /// Builds a model with these parameters, requiring the stored config to equal
    /// `expected`.
    pub fn into_model(self, expected: &ModelConfig) -> Result<XBoundFormer> {
        if &self.config != expected {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint was written for {:?}, requested {:?}",
                self.config, expected
            )));
        }
        let mut model = XBoundFormer::new(self.config, 0)?;
        if self.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters stored, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, value) in self.params {
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let slot = model.params.get_mut(id);
            if slot.dim() != value.dim() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored {:?}, expected {:?}",
                    value.dim(),
                    slot.dim()
                )));
            }
            *slot = value;
        }
        Ok(model)
    }
}

/// Reads a checkpoint and restores it for `expected`.
pub fn load(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<XBoundFormer> {
    read(path)?.into_model(expected)
}
