//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes  "ARDSTCK1"
//! config_len   u32
//! config       config_len bytes of ArchConfig JSON
//! tensor_count u32
//! tensor_count times:
//!   name_len   u16
//!   name       name_len bytes, UTF-8
//!   ndim       u8
//!   dims       ndim x u64
//!   payload    prod(dims) x f32, row-major
//! ```
//!
//! Tensors may appear in any order but must match the config's layout exactly.

use std::collections::HashMap;
use std::io::{self, Read, Write};

use super::model::EncoderModel;
use crate::archspace::ArchConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ARDSTCK1";
const MAX_CONFIG_LEN: usize = 1 << 16;

pub fn write_checkpoint<W: Write>(model: &EncoderModel, mut out: W) -> io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    out.write_all(&(config.len() as u32).to_le_bytes())?;
    out.write_all(&config)?;
    let tensors = model.layout().tensors();
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        out.write_all(&(t.name.len() as u16).to_le_bytes())?;
        out.write_all(t.name.as_bytes())?;
        out.write_all(&[t.shape.len() as u8])?;
        for &d in &t.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &w in &model.params()[t.range()] {
            buf.extend_from_slice(&(w as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()
}

/// Reads a whole checkpoint from `input`.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<EncoderModel> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
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

/// Decodes an in-memory checkpoint. Never panics on malformed input.
pub fn decode(bytes: &[u8]) -> Result<EncoderModel> {
    let bad = |reason: String| Error::format("checkpoint", reason);
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let config_len = cur.u32()? as usize;
    if config_len > MAX_CONFIG_LEN {
        return Err(bad(format!("config block of {config_len} bytes")));
    }
    let config = ArchConfig::from_json_slice(cur.take(config_len)?)?;
    config.check_shape()?;

    // every weight needs 4 payload bytes, so an honest file bounds the allocation
    let expected = crate::estimators::checked_param_count(&config).unwrap_or(u64::MAX);
    if expected.saturating_mul(4) > cur.remaining() as u64 {
        return Err(bad(format!(
            "config declares {expected} parameters but only {} bytes remain",
            cur.remaining()
        )));
    }
    let mut model = EncoderModel::from_params(&config, vec![0.0; expected as usize])?;
    let mut pending: HashMap<String, Vec<usize>> = model
        .layout()
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.shape.clone()))
        .collect();

    let count = cur.u32()? as usize;
    if count != pending.len() {
        return Err(bad(format!("expected {} tensors, found {count}", pending.len())));
    }
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| bad(format!("tensor name: {e}")))?
            .to_owned();
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64()?);
        }
        let want = pending
            .remove(&name)
            .ok_or_else(|| bad(format!("unexpected or duplicate tensor {name:?}")))?;
        if shape.len() != want.len() || shape.iter().zip(&want).any(|(&a, &b)| a != b as u64) {
            return Err(bad(format!("tensor {name:?} has shape {shape:?}, expected {want:?}")));
        }
        let n: usize = want.iter().product();
        let payload = cur.take(n * 4)?;
        let range = model.layout().tensor(&name).unwrap().range();
        for (w, chunk) in model.params_mut()[range].iter_mut().zip(payload.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(bad(format!("non-finite weight in {name:?}")));
            }
            *w = v as f64;
        }
    }
    if cur.remaining() != 0 {
        return Err(bad(format!("{} trailing bytes", cur.remaining())));
    }
    Ok(model)
}
