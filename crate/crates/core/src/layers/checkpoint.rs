//! Checkpoint files: a text header followed by little-endian binary records.
//!
//! ```text
//! pimm-checkpoint 1\n
//! arrays <count>\n
//! repeated <count> times:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, rank x u64 dimensions
//!   product(dimensions) x f64 values
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::layers::ParamSet;
use crate::numerics::Array;

pub const MAGIC: &str = "pimm-checkpoint";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = format!("{MAGIC} {VERSION}\narrays {}\n", params.len()).into_bytes();
    for (name, value) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
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
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let len = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let line = std::str::from_utf8(&rest[..len])
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        self.pos += len + 1;
        Ok(line)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { bytes, pos: 0 };
    let header = r.line()?;
    let version = header
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| Error::Checkpoint(format!("bad magic line {header:?}")))?;
    if version != VERSION.to_string() {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count: usize = r
        .line()?
        .strip_prefix("arrays ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Checkpoint("bad array count line".into()))?;

    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Array::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))?;
        if params.find(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate array {name}")));
        }
        params.add(name, value);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last array".into()));
    }
    Ok(params)
}

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    write_atomic(path, &encode(params))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Copies checkpoint values into `params`, requiring identical names and
/// shapes.
pub fn restore_into(params: &mut ParamSet, saved: &ParamSet) -> Result<()> {
    if params.len() != saved.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} arrays, model has {}",
            saved.len(),
            params.len()
        )));
    }
    for id in params.ids().collect::<Vec<_>>() {
        let name = params.name(id).to_string();
        let src = saved
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
        params.set(id, saved.get(src).clone())?;
    }
    Ok(())
}
