//! `TNSR` binary tensor records.
//!
//! Layout (little-endian): 8-byte magic `TNSR\0\0\0\x01`, u32 dtype tag
//! (0 = f64, 1 = f32), u32 ndim, ndim x u64 dims, then the raw elements.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

pub const MAGIC: [u8; 8] = *b"TNSR\0\0\0\x01";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn tag(self) -> u32 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            t => Err(Error::format(format!("unknown dtype tag {t}"))),
        }
    }
}

/// An n-dimensional buffer as stored on disk. Values are held as `f64`
/// in memory regardless of the stored dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: Vec<f64>) -> Result<Self> {
        let expected: u64 = dims.iter().product();
        if expected != data.len() as u64 {
            return Err(Error::shape(format!(
                "dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            dtype: DType::F64,
            dims,
            data,
        })
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn from_matrix(m: &DenseMatrix) -> Self {
        Tensor {
            dtype: DType::F64,
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: m.data().to_vec(),
        }
    }

    pub fn into_matrix(self) -> Result<DenseMatrix> {
        match self.dims.as_slice() {
            &[r, c] => DenseMatrix::new(r as usize, c as usize, self.data),
            d => Err(Error::format(format!("expected a 2-d tensor, got dims {d:?}"))),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&self.dtype.tag().to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        match self.dtype {
            DType::F64 => {
                for v in &self.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            DType::F32 => {
                for v in &self.data {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::format(format!("bad TNSR magic {magic:?}")));
        }
        let dtype = DType::from_tag(read_u32(r)?)?;
        let ndim = read_u32(r)? as usize;
        let dims = (0..ndim).map(|_| read_u64(r)).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("TNSR dims overflow"))? as usize;
        let data = match dtype {
            DType::F64 => {
                let mut buf = vec![0u8; count * 8];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
            DType::F32 => {
                let mut buf = vec![0u8; count * 4];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
        };
        Ok(Tensor { dtype, dims, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
