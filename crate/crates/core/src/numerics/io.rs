//! Binary containers.
//!
//! `DTNSR1`: magic, `u8` rank, rank × `u32` LE dims, row-major `f32` LE data.
//!
//! `DPACK1`: magic, `u32` LE entry count, then per entry a `u16` LE name
//! length, the UTF-8 name, and an embedded `DTNSR1` record.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 6] = b"DTNSR1";
pub const PACK_MAGIC: &[u8; 6] = b"DPACK1";

pub fn encode_tensor(t: &Tensor<f32>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.reserve(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset(),
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated while reading {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 6]) -> Result<()> {
        let at = self.pos;
        let got = self.take(6, "magic")?;
        if got != magic {
            self.pos = at;
            return self.fail(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(magic)
            ));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        self.magic(TENSOR_MAGIC)?;
        let ndim = self.u8("rank")? as usize;
        if ndim == 0 {
            self.pos -= 1;
            return self.fail("rank must be at least 1");
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = self.u32("dimension")? as usize;
            if d == 0 {
                self.pos -= 4;
                return self.fail("zero-length dimension");
            }
            shape.push(d);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some());
        let Some(n) = n else {
            return self.fail("element count overflows");
        };
        let raw = self.take(n * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_parts(shape, data))
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        base: 0,
    };
    let t = c.tensor()?;
    if c.pos != bytes.len() {
        return c.fail("trailing bytes after tensor");
    }
    Ok(t)
}

pub fn encode_pack(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PACK_MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, value) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(value, &mut out);
    }
    out
}

pub fn decode_pack(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        base: 0,
    };
    c.magic(PACK_MAGIC)?;
    let count = c.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = c.offset();
        let len = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?).map_err(|_| Error::Format {
            offset: at,
            reason: "name is not UTF-8".into(),
        })?;
        let name = name.to_string();
        let t = c.tensor()?;
        store.insert(name, t).map_err(|e| Error::Format {
            offset: at,
            reason: e.to_string(),
        })?;
    }
    if c.pos != bytes.len() {
        return c.fail("trailing bytes after pack");
    }
    Ok(store)
}

/// Writes via a sibling temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    write_atomic(path.as_ref(), &buf)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

pub fn write_pack(path: impl AsRef<Path>, store: &ParamStore<f32>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pack(store))
}

pub fn read_pack(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pack(&bytes)
}
