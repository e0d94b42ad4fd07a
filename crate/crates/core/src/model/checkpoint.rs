//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `MOLACKPT`, `u32` version, `u64` header length, JSON header, `u64`
//! parameter count, then per parameter `u32` name length, UTF-8 name,
//! `u32` rank, `u64` dims, and the values as `f64`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;
use crate::Scalar;

use super::{AdaptedModel, ToyTransformerConfig};

pub const MAGIC: &[u8; 8] = b"MOLACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated blob while reading {0}")]
    TruncatedBlob(String),
    #[error("shape mismatch for parameter {name}: model has {expected:?}, checkpoint has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint lacks parameter {0}")]
    MissingParameter(String),
    #[error("checkpoint has unexpected parameter {0}")]
    UnexpectedParameter(String),
    #[error("invalid model configuration in checkpoint: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ToyTransformerConfig,
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &AdaptedModel<T>) -> Self {
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                config: model.config.clone(),
                seed: model.config.seed,
                step: model.step,
            },
            params: model
                .named_parameters()
                .into_iter()
                .map(|(n, t)| (n, t.shape().to_vec(), t.data().iter().map(|v| v.to_f64_lossy()).collect()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(64 + header.len() + self.params.iter().map(|p| p.2.len() * 8).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.header.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, shape, data) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let hdr = |e: &str| CheckpointError::CorruptHeader(e.to_string());
        if r.take(8).ok_or_else(|| hdr("file shorter than the magic"))? != MAGIC {
            return Err(hdr("bad magic"));
        }
        let version = r.u32().ok_or_else(|| hdr("missing version"))?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = r.u64().ok_or_else(|| hdr("missing header length"))?;
        let raw = usize::try_from(len)
            .ok()
            .and_then(|l| r.take(l))
            .ok_or_else(|| hdr("header extends past end of file"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(raw).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
        if header.format_version != version {
            return Err(hdr("header version disagrees with preamble"));
        }
        let count = r.u64().ok_or_else(|| CheckpointError::TruncatedBlob("parameter count".into()))?;
        let mut params = Vec::new();
        for i in 0..count {
            let trunc = || CheckpointError::TruncatedBlob(format!("parameter #{i}"));
            let name_len = r.u32().ok_or_else(trunc)? as usize;
            let name = String::from_utf8(r.take(name_len).ok_or_else(trunc)?.to_vec())
                .map_err(|_| CheckpointError::CorruptHeader(format!("parameter #{i}: name is not UTF-8")))?;
            let trunc = || CheckpointError::TruncatedBlob(name.clone());
            let rank = r.u32().ok_or_else(trunc)? as usize;
            if rank > 8 {
                return Err(CheckpointError::CorruptHeader(format!("{name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(trunc)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::CorruptHeader(format!("{name}: shape overflows")))?;
            let raw = n.checked_mul(8).and_then(|b| r.take(b)).ok_or_else(trunc)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push((name, shape, data));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::CorruptHeader("trailing bytes after last parameter".into()));
        }
        Ok(Self { header, params })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.flush().map_err(io)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model described by the header and loads every blob.
    pub fn to_model<T: Scalar>(&self) -> Result<AdaptedModel<T>> {
        let mut model = AdaptedModel::build(&self.header.config)
            .map_err(|e| CheckpointError::InvalidConfig(e.to_string()))?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copies blobs into `model`, which must have exactly the same
    /// parameter names and shapes.
    pub fn load_into<T: Scalar>(&self, model: &mut AdaptedModel<T>) -> Result<()> {
        let mut by_name: std::collections::HashMap<&str, (&Vec<usize>, &Vec<f64>)> =
            self.params.iter().map(|(n, s, d)| (n.as_str(), (s, d))).collect();
        let mut staged = Vec::new();
        for (name, t) in model.named_parameters() {
            let (shape, data) = by_name
                .remove(name.as_str())
                .ok_or_else(|| CheckpointError::MissingParameter(name.clone()))?;
            if shape.as_slice() != t.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: t.shape().to_vec(),
                    found: shape.clone(),
                });
            }
            staged.push(data);
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(CheckpointError::UnexpectedParameter(extra.to_string()));
        }
        for ((_, t), data) in model.named_parameters_mut().into_iter().zip(staged) {
            for (dst, &src) in t.data_mut().iter_mut().zip(data) {
                *dst = T::of(src);
            }
        }
        model.step = self.header.step;
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn save<T: Scalar>(model: &AdaptedModel<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model).write(path)
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<AdaptedModel<T>> {
    Checkpoint::read(path)?.to_model()
}

/// Element-wise view of a decoded blob, for inspection.
pub fn blob_tensor<T: Scalar>(shape: &[usize], data: &[f64]) -> Option<Tensor<T>> {
    Tensor::new(shape.to_vec(), data.iter().map(|&v| T::of(v)).collect()).ok()
}
