//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"COLF" | version: u32 | entry*
//! entry  = name_len: u32 | name: utf-8 bytes | rank: u32 | extents: u64 * rank | payload: f64 * product(extents)
//! ```
//!
//! Entries run to end of file.

use std::fs;
use std::path::Path;

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"COLF";
pub const VERSION: u32 = 1;

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { what: "checkpoint", found: version, expected: VERSION });
    }
    let mut entries = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(path, "parameter name is not utf-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n = numel(&shape);
        let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::format(path, "extent overflow"))?, &name)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push((name, Tensor::from_parts(shape, data)));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
