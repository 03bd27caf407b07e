//! Tensor file format: little-endian header
//! `{magic "LTCT", version u32, dtype u8 (0=f32, 1=f64), rank u32, extents u64 x rank}`
//! followed by raw scalars, row-major in (t, h, w, c) order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Result, Scalar, Tensor, TensorError};

pub const TENSOR_MAGIC: [u8; 4] = *b"LTCT";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn from_u8(v: u8) -> Option<Dtype> {
        match v {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> TensorError {
    TensorError::Format { path: path.display().to_string(), reason: reason.into() }
}

pub fn write_tensor<S: Scalar>(path: impl AsRef<Path>, tensor: &Tensor<S>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&[S::DTYPE as u8])?;
    w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
    for &extent in tensor.shape() {
        w.write_all(&(extent as u64).to_le_bytes())?;
    }
    match S::DTYPE {
        Dtype::F32 => {
            for v in tensor.data() {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for v in tensor.data() {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != TENSOR_MAGIC {
        return Err(format_err(path, format!("bad magic {:?}", magic)));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != TENSOR_VERSION {
        return Err(format_err(path, format!("unsupported version {}", version)));
    }
    let mut dtype_byte = [0u8; 1];
    r.read_exact(&mut dtype_byte)?;
    let dtype = Dtype::from_u8(dtype_byte[0])
        .ok_or_else(|| format_err(path, format!("unknown dtype {}", dtype_byte[0])))?;
    if dtype != S::DTYPE {
        return Err(format_err(
            path,
            format!("dtype is {:?}, requested {:?}", dtype, S::DTYPE),
        ));
    }
    r.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(format_err(path, format!("implausible rank {}", rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut u64buf = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut u64buf)?;
        shape.push(u64::from_le_bytes(u64buf) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match dtype {
        Dtype::F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(S::from_f64(f32::from_le_bytes(buf) as f64));
            }
        }
        Dtype::F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(S::from_f64(f64::from_le_bytes(buf)));
            }
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(format_err(path, "trailing bytes after tensor payload"));
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_f64_scalar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ltct");
        let t = Tensor::<f64>::scalar(42.5);
        write_tensor(&p, &t).unwrap();
        let back: Tensor<f64> = read_tensor(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn dtype_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ltct");
        write_tensor(&p, &Tensor::<f32>::zeros(vec![2, 2])).unwrap();
        assert!(read_tensor::<f64>(&p).is_err());
    }

    #[test]
    fn header_layout_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.ltct");
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        write_tensor(&p, &t).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[0..4], b"LTCT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 0); // f32
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[13..21].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[21..29].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 29 + 2 * 4);
    }

    proptest! {
        #[test]
        fn round_trip_preserves_bits(values in prop::collection::vec(-1e6f32..1e6, 1..64)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("rt.ltct");
            let t = Tensor::new(vec![values.len()], values.clone()).unwrap();
            write_tensor(&p, &t).unwrap();
            let back: Tensor<f32> = read_tensor(&p).unwrap();
            prop_assert_eq!(back.data(), &values[..]);
        }
    }
}
