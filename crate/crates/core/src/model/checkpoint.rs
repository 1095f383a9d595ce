//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "VCMB"
//! version    u32
//! spec_len   u32, then spec_len bytes of `key = value` text
//! count      u32
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   kind     u8   (0 = parameter, 1 = buffer)
//!   dtype    u8   (0 = f32, 1 = f64)
//!   rank     u8, then rank x u64 dims
//!   data     numel x dtype-size bytes
//! crc32      u32 over every preceding byte
//! ```

use std::path::Path;

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::params::{EntryKind, ParamStore};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"VCMB";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let spec = model.spec().to_text();
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(spec.as_bytes());
    out.extend_from_slice(&(model.store().len() as u32).to_le_bytes());
    for (name, entry) in model.store().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match entry.kind {
            EntryKind::Param => 0,
            EntryKind::Buffer => 1,
        });
        out.push(T::DTYPE.code());
        out.push(entry.value.rank() as u8);
        for &d in entry.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in entry.value.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }
}

/// Parses and fully validates a checkpoint; nothing is returned unless the
/// whole buffer is well formed.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::Format("missing VCMB magic bytes".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Format(format!(
            "checksum mismatch (stored {stored:#010x}, computed {actual:#010x}); file truncated or corrupted"
        )));
    }

    let mut r = Reader { buf: body, pos: 8 };
    let spec = ModelSpec::from_text(r.string()?)?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?.to_string();
        let kind = match r.u8()? {
            0 => EntryKind::Param,
            1 => EntryKind::Buffer,
            k => return Err(Error::Format(format!("tensor `{name}`: unknown kind {k}"))),
        };
        let dtype = DType::from_code(r.u8()?)
            .ok_or_else(|| Error::Format(format!("tensor `{name}`: unknown dtype")))?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor `{name}` is {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let nbytes = numel
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::Format(format!("tensor `{name}`: shape overflow")))?;
        let data = r.take(nbytes)?.chunks_exact(dtype.size()).map(T::read_le).collect();
        if store.get(&name).is_ok() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
        store.insert(name, Tensor::new(&shape, data)?, kind);
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor table",
            body.len() - r.pos
        )));
    }
    Model::from_store(spec, store)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}
