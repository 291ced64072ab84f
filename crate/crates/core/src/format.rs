//! On-disk formats: CFT1 tensors and binary PGM images.
//!
//! CFT1 layout (all integers little-endian):
//!
//! | bytes        | content                                  |
//! |--------------|------------------------------------------|
//! | 0..4         | magic `CFT1`                             |
//! | 4            | dtype code, `1` = 64-bit float           |
//! | 5            | rank                                     |
//! | 6..8         | reserved, zero                           |
//! | 8..8+8·rank  | dims as `u64`                            |
//! | rest         | row-major `f64` payload                  |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CFT1";
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} need {} values, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Number of leading rows, treating the tensor as `dims[0] × rest`.
    pub fn rows(&self) -> usize {
        self.dims.first().copied().unwrap_or(1)
    }

    pub fn row_len(&self) -> usize {
        self.dims.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.dims.len() > u8::MAX as usize {
            return Err(Error::Shape(format!("rank {} too large", self.dims.len())));
        }
        let mut out = Vec::with_capacity(8 + 8 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(DTYPE_F64);
        out.push(self.dims.len() as u8);
        out.extend_from_slice(&[0, 0]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing CFT1 magic".into()));
        }
        if bytes[4] != DTYPE_F64 {
            return Err(Error::Format(format!("unsupported dtype code {}", bytes[4])));
        }
        if bytes[6] != 0 || bytes[7] != 0 {
            return Err(Error::Format("reserved header bytes are not zero".into()));
        }
        let rank = bytes[5] as usize;
        let header = 8 + 8 * rank;
        if bytes.len() < header {
            return Err(Error::Format("truncated CFT1 header".into()));
        }
        let mut dims = Vec::with_capacity(rank);
        for k in 0..rank {
            let off = 8 + 8 * k;
            let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            dims.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("dimension overflow".into()))?;
        let payload = &bytes[header..];
        if payload.len() != count * 8 {
            return Err(Error::Format(format!(
                "payload has {} bytes, dims {:?} need {}",
                payload.len(),
                dims,
                count * 8
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_bytes(&bytes)
    }
}

/// Encodes a `rows × cols` image with values in `[0, 1]` as PGM P5 (maxval 255).
/// Values are clamped then rounded.
pub fn pgm_bytes(rows: usize, cols: usize, pixels: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", cols, rows).into_bytes();
    out.extend(
        pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Signed difference image: `128 + 127·d/scale`, so zero change is mid-grey.
pub fn pgm_difference_bytes(rows: usize, cols: usize, diff: &[f64], scale: f64) -> Vec<u8> {
    let s = if scale > 0.0 { scale } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", cols, rows).into_bytes();
    out.extend(
        diff.iter()
            .map(|&d| (128.0 + 127.0 * (d / s).clamp(-1.0, 1.0)).round() as u8),
    );
    out
}

pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
