//! Binary model checkpoints.
//!
//! All integers are little-endian.
//!
//! | bytes            | content                                            |
//! |------------------|----------------------------------------------------|
//! | 8                | magic `MFCKPT01` (format name and version)         |
//! | 4                | `u32` length `C` of the model config text          |
//! | C                | UTF-8 `key = value` model config                   |
//! | 4                | `u32` tensor count `T`                             |
//! | per tensor       | `u32` name length, name bytes, `u8` trainable,     |
//! |                  | `u32` rank, `rank` x `u64` dims                    |
//! | sum of sizes x 8 | raw `f64` values of every tensor, in table order   |
//!
//! Nothing may follow the last value. Gradients and optimizer state are not
//! stored.

use std::path::Path;

use modfuse_core::{FusionModel, ParamStore, Tensor};

use crate::config::{model_config_from_text, model_config_to_text};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MFCKPT01";

pub fn encode_checkpoint(model: &FusionModel) -> Vec<u8> {
    let config = model_config_to_text(model.config());
    let store = model.store();
    let mut out = Vec::with_capacity(64 + config.len() + store.num_scalars() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(u8::from(p.trainable));
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for p in store.iter() {
        for x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(
                self.origin,
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn text(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let origin = self.origin;
        std::str::from_utf8(self.take(n, what)?)
            .map_err(|e| Error::format(origin, format!("{what} is not UTF-8: {e}")))
    }
}

pub fn decode_checkpoint(bytes: &[u8], origin: &str) -> Result<FusionModel> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        origin,
    };
    if c.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(
            origin,
            "not a modfuse checkpoint (bad magic or version)",
        ));
    }
    let len = c.u32("config length")? as usize;
    let config = model_config_from_text(c.text(len, "config")?, origin)?;

    let count = c.u32("tensor count")? as usize;
    let mut table = Vec::new();
    for i in 0..count {
        let what = format!("tensor {i} header");
        let name_len = c.u32(&what)? as usize;
        let name = c.text(name_len, &what)?.to_string();
        let trainable = match c.take(1, &what)?[0] {
            0 => false,
            1 => true,
            b => {
                return Err(Error::format(
                    origin,
                    format!("tensor `{name}`: trainable byte {b}"),
                ))
            }
        };
        let rank = c.u32(&what)? as usize;
        let shape = (0..rank)
            .map(|_| c.u64(&what).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        table.push((name, trainable, shape));
    }

    let mut store = ParamStore::new();
    for (name, trainable, shape) in table {
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(n) = n.filter(|n| n.checked_mul(8).is_some()) else {
            return Err(Error::format(
                origin,
                format!("tensor `{name}`: shape {shape:?} too large"),
            ));
        };
        let raw = c.take(n * 8, &format!("values of `{name}`"))?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::format(origin, format!("tensor `{name}`: {e}")))?;
        let id = store
            .add(name.clone(), tensor)
            .map_err(|e| Error::format(origin, format!("tensor `{name}`: {e}")))?;
        store.get_mut(id).trainable = trainable;
    }
    if c.pos != bytes.len() {
        return Err(Error::format(
            origin,
            format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - c.pos
            ),
        ));
    }
    FusionModel::from_parts(config, store).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn save_checkpoint(path: &Path, model: &FusionModel) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<FusionModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
