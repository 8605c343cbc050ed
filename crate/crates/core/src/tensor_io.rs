//! Raw tensor files and 8-bit previews.
//!
//! A tensor file is the magic `IERT`, a little-endian `u32` rank, one `u32`
//! per dimension, then the row-major payload as little-endian `f32`.

use std::fs;
use std::path::Path;

use crate::error::{IerError, Result};
use crate::numerics::SimilarityMap;

pub const TENSOR_MAGIC: &[u8; 4] = b"IERT";

/// A dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = element_count(&dims)?;
        if expected != data.len() {
            return Err(IerError::domain(format!(
                "tensor of shape {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    /// Narrows `f64` values to `f32`.
    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader::new(bytes);
        if reader.take(4)? != TENSOR_MAGIC {
            return Err(IerError::Format("not an IERT tensor".into()));
        }
        let rank = reader.u32()? as usize;
        let dims = (0..rank).map(|_| reader.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = element_count(&dims)?;
        let payload = reader.take(count.checked_mul(4).ok_or_else(|| IerError::Format("tensor too large".into()))?)?;
        if !reader.is_done() {
            return Err(IerError::Format("trailing bytes after tensor payload".into()));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor { dims, data })
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| IerError::Format("tensor shape overflows".into()))
}

/// Sequential little-endian reader shared with the checkpoint format.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| IerError::Format("unexpected end of data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(f64::from_le_bytes(a))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_bytes()).map_err(|e| IerError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| IerError::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

pub fn map_to_tensor(map: &SimilarityMap) -> Result<Tensor> {
    Tensor::from_f64(vec![map.height, map.width], &map.data)
}

/// Linear map from `[-1, 1]` to `[0, 255]`; values outside are clamped.
pub fn to_gray(value: f64) -> u8 {
    if value.is_nan() {
        return 0;
    }
    ((value.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Binary (P5) PGM encoding of a similarity map.
pub fn map_to_pgm(map: &SimilarityMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(map.data.iter().map(|&v| to_gray(v)));
    out
}

pub fn write_pgm(path: impl AsRef<Path>, map: &SimilarityMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, map_to_pgm(map)).map_err(|e| IerError::io(path, e))
}
