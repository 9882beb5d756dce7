//! The `CMGF` feature container.
//!
//! Layout, all little-endian:
//!
//! | bytes        | content                                  |
//! |--------------|------------------------------------------|
//! | 0..4         | magic `CMGF`                             |
//! | 4            | version, currently 1                     |
//! | 5            | rank `r`, 1 through 4                    |
//! | 6..6+4r      | `r` dimensions as `u32`                  |
//! | 6+4r..       | `prod(dims)` row-major `f32` values      |
//!
//! The payload must be exactly `4 * prod(dims)` bytes; trailing bytes are a
//! format error just like truncation.

use std::path::Path;

use crate::error::{read_file, write_file, Error, Result};
use crate::tensor::Mat;

pub const MAGIC: [u8; 4] = *b"CMGF";
pub const VERSION: u8 = 1;
pub const MAX_RANK: usize = 4;

const HEADER_FIXED: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    dims: Vec<u32>,
    data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::validation(format!(
                "tensor rank must be 1..={MAX_RANK}, got {}",
                dims.len()
            )));
        }
        let mut dims32 = Vec::with_capacity(dims.len());
        for &d in &dims {
            dims32.push(u32::try_from(d).map_err(|_| {
                Error::validation(format!("dimension {d} does not fit in u32"))
            })?);
        }
        let expected = element_count(&dims32)
            .ok_or_else(|| Error::validation("dimension product overflows"))?;
        if expected != data.len() {
            return Err(Error::validation(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims: dims32, data })
    }

    pub fn from_mat(m: &Mat) -> Self {
        Self {
            dims: vec![m.rows() as u32, m.cols() as u32],
            data: m.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Reinterprets the payload as a `rows x cols` matrix.
    pub fn to_mat(&self, rows: usize, cols: usize) -> Result<Mat> {
        if rows * cols != self.data.len() {
            return Err(Error::validation(format!(
                "cannot view {:?} as {rows}x{cols}",
                self.dims
            )));
        }
        Ok(Mat::from_vec(
            rows,
            cols,
            self.data.iter().map(|&v| v as f64).collect(),
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_FIXED + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: String| Error::Format { offset, message };
        if bytes.len() < 4 {
            return Err(fmt(bytes.len(), "truncated magic".into()));
        }
        if bytes[..4] != MAGIC {
            return Err(fmt(0, format!("bad magic {:?}", &bytes[..4])));
        }
        let version = *bytes.get(4).ok_or_else(|| fmt(4, "missing version byte".into()))?;
        if version != VERSION {
            return Err(fmt(4, format!("unsupported version {version}")));
        }
        let rank = *bytes.get(5).ok_or_else(|| fmt(5, "missing rank byte".into()))? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(fmt(5, format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        let header = HEADER_FIXED + 4 * rank;
        if bytes.len() < header {
            return Err(fmt(bytes.len(), format!("truncated header, need {header} bytes")));
        }
        let dims: Vec<u32> = bytes[HEADER_FIXED..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let count = element_count(&dims)
            .ok_or_else(|| fmt(HEADER_FIXED, format!("dimension product of {dims:?} overflows")))?;
        let payload = &bytes[header..];
        let expected = count
            .checked_mul(4)
            .ok_or_else(|| fmt(HEADER_FIXED, "payload size overflows".into()))?;
        if payload.len() != expected {
            let offset = header + payload.len().min(expected);
            return Err(fmt(
                offset,
                format!(
                    "payload is {} bytes, dims {dims:?} require {expected}",
                    payload.len()
                ),
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn element_count(dims: &[u32]) -> Option<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
}

pub fn write_feature_file(path: &Path, tensor: &FeatureTensor) -> Result<()> {
    tensor.write(path)
}

pub fn read_feature_file(path: &Path) -> Result<FeatureTensor> {
    FeatureTensor::read(path)
}
