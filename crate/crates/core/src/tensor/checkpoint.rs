//! Parameter checkpoint file.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "TSGCKPT\0"
//! version   u32      currently 1
//! seed      u64      RNG seed the parameters were initialised/trained with
//! count     u32      number of parameter entries
//! entry * count, sorted by name (byte order):
//!   name_len  u32
//!   name      name_len bytes of UTF-8
//!   ndim      u32
//!   dims      u32 * ndim
//!   values    f32 * product(dims), row-major
//! ```

use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"TSGCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_store<S: Scalar>(store: &ParamStore<S>, seed: u64) -> Self {
        let entries = store
            .sorted_names()
            .into_iter()
            .map(|name| {
                let id = store.find(name).expect("name from store");
                let t = store.value(id);
                Entry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    values: t.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
                }
            })
            .collect();
        Self { seed, entries }
    }

    /// Copies values into a store built for the same model; names and shapes
    /// must match exactly.
    pub fn apply_to<S: Scalar>(&self, store: &mut ParamStore<S>) -> Result<()> {
        if self.entries.len() != store.len() {
            return Err(Error::Version(format!(
                "checkpoint has {} parameters, model expects {}",
                self.entries.len(),
                store.len()
            )));
        }
        for e in &self.entries {
            let id = store
                .find(&e.name)
                .ok_or_else(|| Error::Version(format!("unknown parameter {}", e.name)))?;
            if store.value(id).shape() != e.shape.as_slice() {
                return Err(Error::Version(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    e.name,
                    e.shape,
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = Tensor::new(
                &e.shape,
                e.values.iter().map(|&v| S::from_f64_lossy(v as f64)).collect(),
            )?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version(format!("unsupported checkpoint version {version}")));
        }
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { seed, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
