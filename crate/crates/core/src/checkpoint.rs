//! Binary container of named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "T2VU" | version u32 | count u32 | entries...
//! entry: name_len u16 | name utf-8 | dtype u8 | rank u8 | extents u32 * rank | data
//! ```
//!
//! Entries are written in name order, so equal stores give equal bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"T2VU";
pub const VERSION: u32 = 1;

/// A decoded entry; f32 and f64 tensors may share a file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }
}

pub fn encode<E: Element>(store: &ParamStore<E>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + store.numel() * E::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| Error::InvalidArgument("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("tensor name longer than 65535 bytes: {name:.40}...")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(E::DTYPE.code());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::InvalidArgument(format!("{name}: rank above 255")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("{name}: extent above u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Checkpoint {
            offset: self.pos,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn read_data<E: Element>(r: &mut Reader, shape: Vec<usize>, numel: usize) -> Result<Tensor<E>> {
    let size = E::DTYPE.size();
    let bytes = numel
        .checked_mul(size)
        .map_or_else(|| r.fail("tensor size overflows"), Ok)?;
    let raw = r.take(bytes, "tensor data")?;
    let data = raw.chunks_exact(size).map(E::read_le).collect();
    Tensor::new(shape, data)
}

/// Decodes every entry, keeping each tensor's stored dtype.
pub fn decode_any(bytes: &[u8]) -> Result<Vec<(String, AnyTensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported version {version}"));
    }
    let count = r.u32("entry count")?;
    let mut out: Vec<(String, AnyTensor)> = Vec::new();
    for _ in 0..count {
        let start = r.pos;
        let len = r.u16("name length")? as usize;
        let name = match std::str::from_utf8(r.take(len, "name")?) {
            Ok(s) => s.to_string(),
            Err(_) => {
                r.pos = start + 2;
                return r.fail("name is not utf-8");
            }
        };
        if out.iter().any(|(n, _)| *n == name) {
            r.pos = start;
            return r.fail(format!("duplicate tensor {name}"));
        }
        let code = r.u8("dtype")?;
        let Some(dtype) = DType::from_code(code) else {
            r.pos -= 1;
            return r.fail(format!("unknown dtype {code}"));
        };
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.u32("extent")? as usize;
            numel = numel.checked_mul(d).map_or_else(|| r.fail("tensor size overflows"), Ok)?;
            shape.push(d);
        }
        let t = match dtype {
            DType::F32 => AnyTensor::F32(read_data(&mut r, shape, numel)?),
            DType::F64 => AnyTensor::F64(read_data(&mut r, shape, numel)?),
        };
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(out)
}

/// Decodes a store whose entries all have dtype `E`.
pub fn decode<E: Element>(bytes: &[u8]) -> Result<ParamStore<E>> {
    let mut store = ParamStore::new();
    for (name, t) in decode_any(bytes)? {
        let t = match (t, E::DTYPE) {
            (AnyTensor::F32(t), DType::F32) => t.cast(),
            (AnyTensor::F64(t), DType::F64) => t.cast(),
            (t, want) => {
                return Err(Error::InvalidArgument(format!(
                    "tensor {name} has dtype {:?}, expected {want:?}",
                    t.dtype()
                )))
            }
        };
        store.insert(name, t);
    }
    Ok(store)
}

pub fn save_checkpoint<E: Element>(store: &ParamStore<E>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(store)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<E: Element>(path: impl AsRef<Path>) -> Result<ParamStore<E>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
