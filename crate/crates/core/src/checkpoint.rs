//! Little-endian tensor container.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` entry count, then per
//! entry: `u32` name length, UTF-8 name, `u8` dtype code, `u32` rank,
//! `u64` per dimension, raw element bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"GSLDTNSR";
pub const FORMAT_VERSION: u32 = 1;

/// A tensor read back from disk, in its stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn to_real<T: Real>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

fn err(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn encode<T: Real>(entries: &[(&str, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&T::to_le_bytes_vec(t.data()));
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| err("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, StoredTensor)>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(err("bad magic"));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(err(format!("unsupported format version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| err("entry name is not UTF-8"))?
            .to_string();
        let dtype = DType::from_code(c.take(1)?[0]).ok_or_else(|| err(format!("unknown dtype in entry {name}")))?;
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(usize::try_from(c.u64()?).map_err(|_| err("dimension overflow"))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| err("element count overflow"))?;
        let raw = c.take(numel.checked_mul(dtype.size()).ok_or_else(|| err("size overflow"))?)?;
        let t = match dtype {
            DType::F32 => StoredTensor::F32(Tensor::from_vec(&shape, f32::from_le_bytes_slice(raw))?),
            DType::F64 => StoredTensor::F64(Tensor::from_vec(&shape, f64::from_le_bytes_slice(raw))?),
        };
        out.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(err("trailing bytes after last entry"));
    }
    Ok(out)
}

pub fn save_tensors<T: Real>(path: &Path, entries: &[(&str, &Tensor<T>)]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(entries))?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, StoredTensor)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Every parameter and buffer of the store, in insertion order.
pub fn save_store<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let entries: Vec<(&str, &Tensor<T>)> = store.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    save_tensors(path, &entries)
}

/// Loads values into an already constructed store. Every stored name must
/// exist with a matching shape and every store entry must be present.
pub fn load_store_into<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let entries = load_tensors(path)?;
    if entries.len() != store.len() {
        return Err(err(format!(
            "checkpoint has {} entries, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in &entries {
        let id = store.lookup(name).ok_or_else(|| err(format!("unknown entry {name}")))?;
        if store.value(id).shape() != t.shape() {
            return Err(err(format!(
                "entry {name} has shape {:?}, model expects {:?}",
                t.shape(),
                store.value(id).shape()
            )));
        }
    }
    for (name, t) in entries {
        let id = store.lookup(&name).unwrap();
        store.get_mut(id).value = t.to_real();
    }
    Ok(())
}
