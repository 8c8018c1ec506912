//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GDPP" | u8 version (1) | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | rank x u32 extent | f64 payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GDPP";
pub const VERSION: u8 = 1;

pub fn encode(store: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.named_values() {
        let bytes = name.as_bytes();
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name not UTF-8: {e}")))?
            .to_string();
        let rank = r.u8()? as usize;
        if rank == 0 {
            return Err(Error::Checkpoint(format!("tensor {name} has rank 0")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u32()? as usize;
            if d == 0 {
                return Err(Error::Checkpoint(format!("tensor {name} has a zero extent")));
            }
            shape.push(d);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        out.push((name, Tensor::new(shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(store: &ParameterStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}
