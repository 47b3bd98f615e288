//! Named-tensor storage shared by parameters, gradients, and optimizer state.
//!
//! Tensors live in a `BTreeMap` so every iteration order — checkpointing,
//! digesting, optimizer sweeps — is deterministic. In memory everything is
//! f64; on disk values are stored as little-endian f32 behind a JSON header.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::EncoderConfig;

const MAGIC: &[u8; 8] = b"ENCKPT01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint payload truncated: tensor {name} expects {expected} values")]
    Truncated { name: String, expected: usize },
    #[error("checkpoint has trailing bytes after the last tensor")]
    TrailingBytes,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

/// Deterministically ordered map from tensor name to f64 array.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorMap {
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing tensor {name}"))
    }

    pub fn view2(&self, name: &str) -> ArrayView2<'_, f64> {
        self.get(name)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap_or_else(|_| panic!("tensor {name} is not 2-d"))
    }

    pub fn view1(&self, name: &str) -> ArrayView1<'_, f64> {
        self.get(name)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap_or_else(|_| panic!("tensor {name} is not 1-d"))
    }

    pub fn view2_mut(&mut self, name: &str) -> ArrayViewMut2<'_, f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing tensor {name}"))
            .view_mut()
            .into_dimensionality::<Ix2>()
            .unwrap_or_else(|_| panic!("tensor {name} is not 2-d"))
    }

    pub fn view1_mut(&mut self, name: &str) -> ArrayViewMut1<'_, f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing tensor {name}"))
            .view_mut()
            .into_dimensionality::<Ix1>()
            .unwrap_or_else(|_| panic!("tensor {name} is not 1-d"))
    }

    /// Accumulator access: creates a zero tensor of `shape` on first use.
    pub fn accumulate(&mut self, name: &str, shape: &[usize]) -> &mut ArrayD<f64> {
        self.tensors
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(IxDyn(shape)))
    }

    /// A map with the same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
            .collect();
        Self { tensors }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Global L2 norm across every element of every tensor.
    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .values()
            .map(|t| t.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|x| x * factor);
        }
    }

    /// `self += factor * other` over matching names; panics on mismatch.
    pub fn add_scaled(&mut self, other: &TensorMap, factor: f64) {
        for (name, t) in &mut self.tensors {
            let o = other.get(name);
            t.scaled_add(factor, o);
        }
    }

    /// SHA-256 over a canonical byte encoding (names, shapes, f64 LE values
    /// in map order). Two maps share a digest iff they are bit-identical.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update((t.ndim() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in t.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes `MAGIC | u64 header-length | header JSON | f32 LE payload`.
    pub fn save(&self, path: &Path, config: &EncoderConfig) -> Result<(), CheckpointError> {
        let header = Header {
            config: config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorInfo {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for t in self.tensors.values() {
            for &x in t.iter() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, EncoderConfig), CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let mut header_bytes = vec![0u8; u64::from_le_bytes(len_bytes) as usize];
        r.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)?;
        let mut tensors = BTreeMap::new();
        for info in header.tensors {
            let n: usize = info.shape.iter().product();
            let mut values = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated {
                    name: info.name.clone(),
                    expected: n,
                })?;
                values.push(f32::from_le_bytes(buf) as f64);
            }
            let t = ArrayD::from_shape_vec(IxDyn(&info.shape), values)
                .expect("shape product matches value count");
            tensors.insert(info.name, t);
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(CheckpointError::TrailingBytes);
        }
        Ok((Self { tensors }, header.config))
    }
}
