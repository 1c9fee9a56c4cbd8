//! Checkpoint container.
//!
//! Layout: magic `SEQE`, format version (u32 LE), entry count (u64 LE), a
//! tensor table (per entry: name length + UTF-8 name, dtype code, rank,
//! dims, byte offset into the data section), then the raw little-endian
//! buffers. Entries are sorted by name before writing so that identical
//! parameters always serialize to identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SEQE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl TensorEntry {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.byte_width());
        t.with_data(|d| {
            for &v in d {
                v.append_le_bytes(&mut bytes);
            }
        });
        TensorEntry {
            name: name.into(),
            dtype: T::DTYPE,
            dims: t.shape(),
            bytes,
        }
    }

    pub fn f64_scalar(name: impl Into<String>, v: f64) -> Self {
        TensorEntry {
            name: name.into(),
            dtype: DType::F64,
            dims: vec![],
            bytes: v.to_le_bytes().to_vec(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {} has dtype code {}, expected {}",
                self.name,
                self.dtype.code(),
                T::DTYPE.code()
            )));
        }
        let width = self.dtype.byte_width();
        if self.bytes.len() % width != 0 {
            return Err(Error::Checkpoint(format!(
                "tensor {} has truncated payload",
                self.name
            )));
        }
        let data: Vec<T> = self
            .bytes
            .chunks(width)
            .map(|c| T::from_le_slice(c))
            .collect();
        Tensor::from_vec(data, &self.dims)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", self.name)))
    }

    pub fn as_f64_scalar(&self) -> Result<f64> {
        if self.dtype != DType::F64 || self.bytes.len() != 8 {
            return Err(Error::Checkpoint(format!(
                "entry {} is not an f64 scalar",
                self.name
            )));
        }
        Ok(f64::from_le_bytes(self.bytes[..8].try_into().unwrap()))
    }
}

pub fn write_container(entries: &[TensorEntry]) -> Vec<u8> {
    let mut sorted: Vec<&TensorEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));

    let mut table = Vec::new();
    let mut data = Vec::new();
    for entry in &sorted {
        let offset = data.len() as u64;
        table.extend_from_slice(&(entry.name.len() as u32).to_le_bytes());
        table.extend_from_slice(entry.name.as_bytes());
        table.push(entry.dtype.code());
        table.extend_from_slice(&(entry.dims.len() as u32).to_le_bytes());
        for &d in &entry.dims {
            table.extend_from_slice(&(d as u64).to_le_bytes());
        }
        table.extend_from_slice(&offset.to_le_bytes());
        data.extend_from_slice(&entry.bytes);
    }

    let mut out = Vec::with_capacity(4 + 4 + 8 + table.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(sorted.len() as u64).to_le_bytes());
    out.extend_from_slice(&table);
    out.extend_from_slice(&data);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of container".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn read_container(bytes: &[u8]) -> Result<Vec<TensorEntry>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = cur.u64()? as usize;
    let mut meta = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF8 tensor name".into()))?;
        let dtype = DType::from_code(cur.u8()?)?;
        let rank = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u64()? as usize);
        }
        let offset = cur.u64()? as usize;
        meta.push((name, dtype, dims, offset));
    }
    let data_start = cur.pos;
    let mut entries = Vec::with_capacity(count);
    for (name, dtype, dims, offset) in meta {
        let len: usize = dims.iter().product::<usize>() * dtype.byte_width();
        let start = data_start + offset;
        if start + len > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} payload out of bounds"
            )));
        }
        entries.push(TensorEntry {
            name,
            dtype,
            dims,
            bytes: bytes[start..start + len].to_vec(),
        });
    }
    Ok(entries)
}

pub fn save_file(path: impl AsRef<Path>, entries: &[TensorEntry]) -> Result<()> {
    let bytes = write_container(entries);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_file(path: impl AsRef<Path>) -> Result<Vec<TensorEntry>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_container(&bytes)
}

/// Look up an entry by name.
pub fn find<'a>(entries: &'a [TensorEntry], name: &str) -> Result<&'a TensorEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise_identical() {
        let a = Tensor::<f32>::vector(vec![1.5, -2.25, 3.0]);
        let b = Tensor::<f64>::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let entries = vec![
            TensorEntry::from_tensor("b/mat", &b),
            TensorEntry::from_tensor("a/vec", &a),
            TensorEntry::f64_scalar("meta/x", 42.0),
        ];
        let bytes1 = write_container(&entries);
        let loaded = read_container(&bytes1).unwrap();
        let bytes2 = write_container(&loaded);
        assert_eq!(bytes1, bytes2);
        assert_eq!(find(&loaded, "meta/x").unwrap().as_f64_scalar().unwrap(), 42.0);
        let a2: Tensor<f32> = find(&loaded, "a/vec").unwrap().to_tensor().unwrap();
        assert_eq!(a2.value(), a.value());
    }

    #[test]
    fn magic_is_checked() {
        let err = read_container(b"NOPE00000000").unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn entry_order_does_not_change_bytes() {
        let a = TensorEntry::f64_scalar("x", 1.0);
        let b = TensorEntry::f64_scalar("y", 2.0);
        assert_eq!(
            write_container(&[a.clone(), b.clone()]),
            write_container(&[b, a])
        );
    }

    #[test]
    fn dtype_mismatch_is_reported() {
        let t = Tensor::<f32>::vector(vec![1.0]);
        let entry = TensorEntry::from_tensor("t", &t);
        assert!(entry.to_tensor::<f64>().is_err());
    }
}
