//! SHRT binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | offset          | size      | content                        |
//! |-----------------|-----------|--------------------------------|
//! | 0               | 4         | magic `b"SHRT"`                |
//! | 4               | 1         | version, currently `1`         |
//! | 5               | 1         | dtype code: 1=f32, 2=f64, 3=u8 |
//! | 6               | 1         | ndim                           |
//! | 7               | 8 * ndim  | dims as u64                    |
//! | 7 + 8 * ndim    | ...       | row-major payload              |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SHRT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::U8 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            3 => Ok(DType::U8),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::U8 => "u8",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An n-dimensional row-major array as stored in a SHRT file.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) || dims.len() > u8::MAX as usize {
            return Err(Error::InvalidDims(dims));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {expected} elements, payload has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f32(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(values))
    }

    pub fn from_f64(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(dims, TensorData::F64(values))
    }

    pub fn from_u8(dims: Vec<usize>, values: Vec<u8>) -> Result<Self> {
        Self::new(dims, TensorData::U8(values))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    /// Widens any numeric payload to f64.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }

    pub fn header_len(ndim: usize) -> usize {
        7 + 8 * ndim
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = self.data.len() * self.dtype().size();
        let mut out = Vec::with_capacity(Self::header_len(self.dims.len()) + payload);
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.dtype().code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Parses a SHRT byte stream. With `require_finite`, any NaN or infinity in
    /// a float payload is rejected.
    pub fn decode(bytes: &[u8], require_finite: bool) -> Result<Self> {
        if bytes.len() < 7 {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(Error::BadMagic {
                    found: bytes[..4].try_into().unwrap(),
                });
            }
            return Err(Error::Truncated {
                expected: 7,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        let dtype = DType::from_code(bytes[5])?;
        let ndim = bytes[6] as usize;
        let header = Self::header_len(ndim);
        if bytes.len() < header {
            return Err(Error::Truncated {
                expected: header,
                found: bytes.len(),
            });
        }
        let mut dims = Vec::with_capacity(ndim);
        for i in 0..ndim {
            let start = 7 + 8 * i;
            let raw = u64::from_le_bytes(bytes[start..start + 8].try_into().unwrap());
            let dim = usize::try_from(raw).map_err(|_| Error::InvalidDims(vec![usize::MAX]))?;
            dims.push(dim);
        }
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidDims(dims));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidDims(dims.clone()))?;
        let payload_len = count
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::InvalidDims(dims.clone()))?;
        let body = &bytes[header..];
        if body.len() < payload_len {
            return Err(Error::Truncated {
                expected: header + payload_len,
                found: bytes.len(),
            });
        }
        if body.len() > payload_len {
            return Err(Error::TrailingBytes(body.len() - payload_len));
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(body.to_vec()),
        };
        if require_finite {
            let bad = match &data {
                TensorData::F32(v) => v.iter().position(|x| !x.is_finite()),
                TensorData::F64(v) => v.iter().position(|x| !x.is_finite()),
                TensorData::U8(_) => None,
            };
            if let Some(index) = bad {
                return Err(Error::NonFinite { index });
            }
        }
        Ok(Self { dims, data })
    }
}

/// Reads a SHRT file without a finiteness requirement.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor_with(path, false)
}

/// Reads a SHRT file, rejecting non-finite float values.
pub fn read_tensor_finite(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor_with(path, true)
}

fn read_tensor_with(path: impl AsRef<Path>, require_finite: bool) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes, require_finite)
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &tensor.encode())
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_three_f32_roundtrip() {
        let t = Tensor::from_f32(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = t.encode();
        assert_eq!(bytes.len(), 7 + 16 + 24);
        assert_eq!(Tensor::decode(&bytes, true).unwrap(), t);
    }

    #[test]
    fn short_payload_is_truncation() {
        let t = Tensor::from_f32(vec![2, 3], vec![0.0; 6]).unwrap();
        let mut bytes = t.encode();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            Tensor::decode(&bytes, false),
            Err(Error::Truncated {
                expected: 47,
                found: 43
            })
        ));
    }

    #[test]
    fn one_by_one_layout_is_exact() {
        let t = Tensor::from_f32(vec![1, 1], vec![0.5]).unwrap();
        let bytes = t.encode();
        // 4 magic + version + dtype + ndim + two u64 dims
        assert_eq!(Tensor::header_len(2), 23);
        let mut expected = b"SHRT".to_vec();
        expected.extend_from_slice(&[1, 1, 2]);
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&0.5f32.to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(bytes.len(), 27);
    }

    #[test]
    fn rejects_empty_or_zero_dims() {
        assert!(matches!(
            Tensor::from_f32(vec![], vec![]),
            Err(Error::InvalidDims(_))
        ));
        assert!(matches!(
            Tensor::from_u8(vec![3, 0], vec![]),
            Err(Error::InvalidDims(_))
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = Tensor::from_u8(vec![2], vec![1, 2]).unwrap().encode();
        bytes[0] = b'X';
        assert!(matches!(
            Tensor::decode(&bytes, false),
            Err(Error::BadMagic { .. })
        ));
        bytes[0] = b'S';
        bytes[4] = 9;
        assert!(matches!(
            Tensor::decode(&bytes, false),
            Err(Error::UnsupportedVersion(9))
        ));
        bytes[4] = 1;
        bytes[5] = 7;
        assert!(matches!(
            Tensor::decode(&bytes, false),
            Err(Error::UnknownDtype(7))
        ));
    }

    #[test]
    fn non_finite_only_when_required() {
        let t = Tensor::from_f64(vec![3], vec![1.0, f64::NAN, 2.0]).unwrap();
        let bytes = t.encode();
        assert!(Tensor::decode(&bytes, false).is_ok());
        assert!(matches!(
            Tensor::decode(&bytes, true),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = Tensor::from_u8(vec![2], vec![1, 2]).unwrap().encode();
        bytes.push(0);
        assert!(matches!(
            Tensor::decode(&bytes, false),
            Err(Error::TrailingBytes(1))
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.shrt");
        let t = Tensor::from_f64(vec![2, 2], vec![0.1, -0.2, 3e300, -0.0]).unwrap();
        write_tensor(&t, &path).unwrap();
        assert_eq!(read_tensor_finite(&path).unwrap(), t);
    }
}
