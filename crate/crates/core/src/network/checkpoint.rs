//! Binary weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MMUW1" | version: u16 | count: u32
//! count × { name_len: u16 | name: utf-8 | rank: u8 | dims: rank × u32 | offset: u64 }
//! payload: f64 values, `offset` counted in values from the payload start
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MMUW1";
const VERSION: u16 = 1;

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut head = Vec::new();
    head.extend_from_slice(CHECKPOINT_MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.extend_from_slice(&(store.len() as u32).to_le_bytes());
    let mut payload = Vec::new();
    let mut offset = 0u64;
    for (name, t) in store.iter() {
        head.extend_from_slice(&(name.len() as u16).to_le_bytes());
        head.extend_from_slice(name.as_bytes());
        head.push(t.shape().len() as u8);
        for &d in t.shape() {
            head.extend_from_slice(&(d as u32).to_le_bytes());
        }
        head.extend_from_slice(&offset.to_le_bytes());
        for &v in t.data() {
            payload.extend_from_slice(&(v as f64).to_le_bytes());
        }
        offset += t.numel() as u64;
    }
    head.extend_from_slice(&payload);
    head
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(5)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a weight file (bad magic)".into()));
    }
    let version = u16::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported weight file version {version}")));
    }
    let count = u32::from_le_bytes(r.array()?) as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not utf-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let dims = (0..rank)
            .map(|_| Ok(u32::from_le_bytes(r.array()?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = u64::from_le_bytes(r.array()?) as usize;
        entries.push((name, dims, offset));
    }
    let payload = &bytes[r.pos..];
    entries
        .into_iter()
        .map(|(name, dims, offset)| {
            let n: usize = dims.iter().product();
            let start = offset.checked_mul(8);
            let end = offset.checked_add(n).and_then(|e| e.checked_mul(8));
            let raw = match (start, end) {
                (Some(s), Some(e)) if e <= payload.len() => &payload[s..e],
                _ => return Err(Error::Format(format!("parameter {name}: payload out of range"))),
            };
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as Real)
                .collect();
            let t = Tensor::new(&dims, data).map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
            Ok((name, t))
        })
        .collect()
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

/// Overwrites every parameter of `store` from the file; names and shapes
/// must match exactly.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let entries = decode_checkpoint(&std::fs::read(path)?)?;
    let mut other = ParamStore::new(store.seed());
    for (name, t) in entries {
        if other.id(&name).is_some() {
            return Err(Error::Format(format!("duplicate parameter {name}")));
        }
        other.add(&name, t);
    }
    store.load_from(&other)
}
