//! Binary tensor files.
//!
//! Layout, all little-endian: magic `CRFU`, `u32` version 1, `u8` dtype
//! (1 = f32, 2 = f64), `u8` ndim, two zero bytes, `ndim` x `u64` dims,
//! then the row-major payload with the last dimension fastest.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::PixelGrid;
use crate::potentials::UnaryField;

pub const MAGIC: &[u8; 4] = b"CRFU";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::F64(_) => 2,
        }
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    dims: Vec<usize>,
    data: TensorData,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.len() > usize::from(u8::MAX) {
            return Err(Error::Invalid(format!("{} dimensions exceed 255", dims.len())));
        }
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if count != Some(data.len()) {
            return Err(Error::shape(
                "tensor payload",
                format!("{dims:?}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(TensorFile { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// `H x W x L` energies as a unary field.
    pub fn from_unary(unary: &UnaryField) -> Self {
        let g = unary.grid();
        TensorFile {
            dims: vec![g.height(), g.width(), unary.num_labels()],
            data: TensorData::F64(unary.energies().iter().copied().collect()),
        }
    }

    /// Interprets an `H x W x L` tensor as unary energies.
    pub fn to_unary(&self) -> Result<UnaryField> {
        let &[h, w, l] = self.dims.as_slice() else {
            return Err(Error::shape(
                "unary tensor dims",
                "[height, width, labels]",
                format!("{:?}", self.dims),
            ));
        };
        let grid = PixelGrid::new(w, h)?;
        if l == 0 {
            return Err(Error::Invalid("unary tensor has no labels".into()));
        }
        let energies = Array2::from_shape_vec((w * h, l), self.data.to_f64())
            .map_err(|e| Error::Invalid(e.to_string()))?;
        UnaryField::new(grid, energies)
    }

    pub fn encode(&self) -> Vec<u8> {
        let elem = if self.data.dtype() == 1 { 4 } else { 8 };
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.dims.len() + elem * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.dtype());
        out.push(self.dims.len() as u8);
        out.extend_from_slice(&[0, 0]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Parses a tensor; `name` labels diagnostics.
    pub fn decode(bytes: &[u8], name: &str) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Format {
            path: name.to_string(),
            offset: offset as u64,
            message,
        };
        if bytes.len() < HEADER_LEN {
            return Err(fail(
                bytes.len(),
                format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
            ));
        }
        if &bytes[0..4] != MAGIC {
            return Err(fail(0, format!("bad magic {:?}, expected \"CRFU\"", &bytes[0..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let dtype = bytes[8];
        let elem = match dtype {
            1 => 4,
            2 => 8,
            other => return Err(fail(8, format!("unknown dtype {other}"))),
        };
        let ndim = usize::from(bytes[9]);
        if bytes[10] != 0 || bytes[11] != 0 {
            return Err(fail(10, "reserved bytes must be zero".into()));
        }
        let dims_end = HEADER_LEN + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(fail(bytes.len(), format!("truncated dims: expected {ndim} dims")));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut count: usize = 1;
        for k in 0..ndim {
            let at = HEADER_LEN + 8 * k;
            let d = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
            let d = usize::try_from(d).map_err(|_| fail(at, format!("dim {d} too large")))?;
            count = count
                .checked_mul(d)
                .ok_or_else(|| fail(at, "element count overflows".into()))?;
            dims.push(d);
        }
        let expected = count
            .checked_mul(elem)
            .ok_or_else(|| fail(dims_end, "payload size overflows".into()))?;
        let payload = &bytes[dims_end..];
        if payload.len() != expected {
            return Err(fail(
                dims_end + payload.len().min(expected),
                format!(
                    "payload is {} bytes, dims {dims:?} need {expected}",
                    payload.len()
                ),
            ));
        }
        let data = if dtype == 1 {
            TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            )
        } else {
            TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            )
        };
        Ok(TensorFile { dims, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        TensorFile::decode(&bytes, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}
