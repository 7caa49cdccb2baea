//! Binary tensor files.
//!
//! Layout: magic `CATT`, dtype byte (0 = f32, 1 = f64), rank byte, `rank`
//! little-endian u32 extents, then the row-major scalars in little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{numel, DType, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CATT";

/// A tensor read from disk whose dtype is only known at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn into_f32(self) -> Tensor<f32> {
        match self {
            AnyTensor::F32(t) => t,
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn into_f64(self) -> Tensor<f64> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t,
        }
    }
}

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Argument(format!("rank {} does not fit the file header", t.rank())));
    }
    let mut buf = Vec::with_capacity(6 + 4 * t.rank() + t.len() * std::mem::size_of::<T>());
    buf.extend_from_slice(MAGIC);
    buf.push(T::DTYPE as u8);
    buf.push(t.rank() as u8);
    for &e in t.shape() {
        let e = u32::try_from(e)
            .map_err(|_| Error::Argument(format!("extent {e} does not fit in u32")))?;
        buf.extend_from_slice(&e.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Load("truncated tensor data".into()),
        _ => Error::Io(e),
    })
}

fn read_body<T: Scalar, R: Read>(r: &mut R, shape: &[usize]) -> Result<Tensor<T>> {
    let size = std::mem::size_of::<T>();
    let mut bytes = vec![0u8; numel(shape) * size];
    read_exact(r, &mut bytes)?;
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<AnyTensor> {
    let mut head = [0u8; 6];
    read_exact(r, &mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Load(format!("bad tensor magic {:?}", &head[..4])));
    }
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 4];
        read_exact(r, &mut e)?;
        shape.push(u32::from_le_bytes(e) as usize);
    }
    match head[4] {
        0 => Ok(AnyTensor::F32(read_body(r, &shape)?)),
        1 => Ok(AnyTensor::F64(read_body(r, &shape)?)),
        t => Err(Error::Load(format!("unknown dtype tag {t}"))),
    }
}

pub fn write_tensor_file<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let bytes = fs::read(path)?;
    let mut cursor = bytes.as_slice();
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Load(format!("{} trailing bytes after tensor", cursor.len())));
    }
    Ok(t)
}
