//! DTF, the dense tensor container used for features, masks and score maps.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size      | field                               |
//! |--------|-----------|-------------------------------------|
//! | 0      | 4         | magic `DTF1`                        |
//! | 4      | 1         | dtype code (`1` = f32)              |
//! | 5      | 1         | rank                                |
//! | 6      | 6         | zero padding                        |
//! | 12     | 8 × rank  | dims as u64                         |
//! | ...    | 4 × ∏dims | row-major f32 payload               |

use std::fs;
use std::path::Path;

use crate::error::{DiceError, Result};

pub const MAGIC: &[u8; 4] = b"DTF1";
pub const DTYPE_F32: u8 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct DtfTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl DtfTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if dims.is_empty() || dims.len() > u8::MAX as usize || expected != data.len() {
            return Err(DiceError::ShapeMismatch(format!(
                "dims {:?} hold {} values, payload has {}",
                dims,
                expected,
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    /// Builds a tensor from f64 values, narrowing to f32.
    pub fn from_f64(dims: Vec<usize>, values: impl IntoIterator<Item = f64>) -> Result<Self> {
        Self::new(dims, values.into_iter().map(|v| v as f32).collect())
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.rank() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(DTYPE_F32);
        out.push(self.rank() as u8);
        out.extend_from_slice(&[0u8; 6]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC || bytes[4] != DTYPE_F32 {
            return Err(DiceError::NotDtf);
        }
        if bytes[6..12].iter().any(|&b| b != 0) {
            return Err(DiceError::NotDtf);
        }
        let rank = bytes[5] as usize;
        if rank == 0 {
            return Err(DiceError::ShapeMismatch("rank 0".into()));
        }
        let dims_end = HEADER_LEN + 8 * rank;
        if bytes.len() < dims_end {
            return Err(DiceError::ShapeMismatch("truncated dims".into()));
        }
        let dims: Vec<usize> = bytes[HEADER_LEN..dims_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| DiceError::ShapeMismatch("dims overflow".into()))?;
        let payload = &bytes[dims_end..];
        if Some(payload.len()) != count.checked_mul(4) {
            return Err(DiceError::ShapeMismatch(format!(
                "dims {:?} need {} payload bytes, found {}",
                dims,
                count.saturating_mul(4),
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn expect_rank(&self, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(DiceError::ShapeMismatch(format!(
                "expected rank {rank}, found rank {}",
                self.rank()
            )));
        }
        Ok(())
    }
}
