//! Binary checkpoint container shared by every trained component.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MGSTCKPT"
//! version    u32      FORMAT_VERSION
//! dtype      u8       4 = f32, 8 = f64
//! meta_len   u32      followed by meta_len bytes of UTF-8 metadata
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes
//!   ndim     u32, ndim × u64 dimensions
//!   data     product(dims) floats of the declared dtype
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::numeric::{NumericError, ParameterStore, Tensor};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"MGSTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("unknown dtype code {0}")]
    DType(u8),
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("invalid checkpoint contents: {0}")]
    Corrupt(String),
    #[error("tensor `{name}` missing from checkpoint")]
    Missing { name: String },
    #[error("tensor `{name}` has shape {found:?} in checkpoint, model expects {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Named tensors plus free-form metadata, at precision `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub meta: String,
    pub tensors: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(meta: impl Into<String>) -> Self {
        Self {
            meta: meta.into(),
            tensors: Vec::new(),
        }
    }

    pub fn from_store(meta: impl Into<String>, store: &ParameterStore<S>) -> Self {
        Self {
            meta: meta.into(),
            tensors: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn push(&mut self, name: &str, t: Tensor<S>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing { name: name.into() })
    }

    /// Copies every stored parameter of `store` from this checkpoint after
    /// validating all names and shapes; `store` is untouched on error.
    pub fn restore_into(&self, store: &mut ParameterStore<S>) -> Result<()> {
        for (name, value) in store.iter() {
            let t = self.get(name)?;
            if t.shape() != value.shape() {
                return Err(CheckpointError::Shape {
                    name: name.into(),
                    found: t.shape().to_vec(),
                    expected: value.shape().to_vec(),
                });
            }
        }
        store.load_values(self.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(S::DTYPE.code());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Parses a full checkpoint; stored values are converted to `S`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let code = r.take(1, "dtype")?[0];
        let dtype = DType::from_code(code).ok_or(CheckpointError::DType(code))?;
        let meta_len = r.u32("metadata length")? as usize;
        let meta = String::from_utf8(r.take(meta_len, "metadata")?.to_vec())
            .map_err(|e| CheckpointError::Corrupt(format!("metadata is not UTF-8: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|e| CheckpointError::Corrupt(format!("tensor name is not UTF-8: {e}")))?;
            let ndim = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u64("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Corrupt(format!("`{name}` shape overflows")))?;
            let raw = r.take(
                numel
                    .checked_mul(dtype.size())
                    .ok_or_else(|| CheckpointError::Corrupt("tensor size overflows".into()))?,
                "tensor data",
            )?;
            let data: Vec<S> = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| S::lit(f32::read_le(c) as f64)).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| S::lit(f64::read_le(c))).collect(),
            };
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(format!("`{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, tensors })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("tmp-ckpt");
        {
            let mut f = fs::File::create(&tmp).map_err(io)?;
            f.write_all(&self.to_bytes()).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated { what }),
        }
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut c = Checkpoint::new("kind = \"test\"");
        c.push("a", Tensor::new(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap());
        c.push("b", Tensor::scalar(7.0));
        c
    }

    #[test]
    fn bytes_roundtrip() {
        let c = sample();
        assert_eq!(Checkpoint::<f32>::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            assert!(Checkpoint::<f32>::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes),
            Err(CheckpointError::Version { found: 9 })
        ));
    }

    #[test]
    fn precision_converts_on_load() {
        let c = sample();
        let wide = Checkpoint::<f64>::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(wide.get("a").unwrap().data()[2], 3.5);
    }

    #[test]
    fn restore_names_mismatched_tensor() {
        let mut store = ParameterStore::<f32>::new();
        store.add("a", Tensor::zeros(&[2, 3])).unwrap();
        let err = sample().restore_into(&mut store).unwrap_err();
        assert!(err.to_string().contains("`a`"), "{err}");
    }
}
