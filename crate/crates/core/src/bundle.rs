//! Tensor-bundle binary format.
//!
//! ```text
//! "SWNB" | u32 version = 1 | u32 entry count
//! per entry: u16 name length | UTF-8 name | u8 dtype (0 = f32, 1 = f64)
//!            | u8 ndim | u32 dims[ndim] | little-endian values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SWNB";
pub const VERSION: u32 = 1;

/// A tensor stored at its own precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Entry {
    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.shape(),
            Entry::F64(t) => t.shape(),
        }
    }

    /// The stored values converted into `T`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            Entry::F32(t) => t.cast(),
            Entry::F64(t) => t.cast(),
        }
    }
}

pub trait IntoEntry {
    fn into_entry(self) -> Entry;
}

impl IntoEntry for Tensor<f32> {
    fn into_entry(self) -> Entry {
        Entry::F32(self)
    }
}

impl IntoEntry for Tensor<f64> {
    fn into_entry(self) -> Entry {
        Entry::F64(self)
    }
}

/// Ordered list of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bundle {
    entries: Vec<(String, Entry)>,
}

impl Bundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, tensor: impl IntoEntry) {
        let name = name.into();
        let entry = tensor.into_entry();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = entry,
            None => self.entries.push((name, entry)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    /// Entry `name` converted to `T`, or a format error when absent.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .map(|e| e.to_tensor())
            .ok_or_else(|| Error::Format(format!("missing entry `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len())
                .map_err(|_| Error::Format(format!("entry name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            let (dtype, shape) = match entry {
                Entry::F32(t) => (DType::F32, t.shape()),
                Entry::F64(t) => (DType::F64, t.shape()),
            };
            out.push(dtype.code());
            out.push(shape.len() as u8);
            for &d in shape {
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent too large in {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match entry {
                Entry::F32(t) => t.data().iter().for_each(|v| v.push_le(&mut out)),
                Entry::F64(t) => t.data().iter().for_each(|v| v.push_le(&mut out)),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut bundle = Bundle::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = DType::from_code(r.take(1)?[0])
                .ok_or_else(|| Error::Format(format!("unknown dtype in `{name}`")))?;
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let bytes_len = shape
                .iter()
                .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("shape of `{name}` overflows")))?;
            let raw = r.take(bytes_len)?;
            let entry = match dtype {
                DType::F32 => Entry::F32(Tensor::new(&shape, raw.chunks_exact(4).map(f32::read_le).collect())?),
                DType::F64 => Entry::F64(Tensor::new(&shape, raw.chunks_exact(8).map(f64::read_le).collect())?),
            };
            bundle.entries.push((name, entry));
        }
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("swnb.tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated bundle".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
