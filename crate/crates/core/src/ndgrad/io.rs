//! CFT tensor files.
//!
//! Layout: `"CFT1"` | version `u8 = 1` | dtype `u8` (0 = f32, 1 = f64,
//! 2 = complex64) | rank `u8` | `rank` x `u32` little-endian dims |
//! row-major little-endian payload. Complex64 payloads interleave
//! `(re, im)` as two f32 values per element.

use std::io::{Read, Write};
use std::path::Path;

use super::element::{DType, Element};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CFT1";
pub const VERSION: u8 = 1;

/// A tensor of any CFT dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    /// Shape and interleaved `(re, im)` pairs.
    Complex64 {
        shape: Vec<usize>,
        data: Vec<f32>,
    },
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::Complex64 { .. } => DType::Complex64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::Complex64 { shape, .. } => shape,
        }
    }

    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Ok(t),
            other => Err(Error::Format(format!(
                "expected f32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn into_f64(self) -> Result<Tensor<f64>> {
        match self {
            AnyTensor::F64(t) => Ok(t),
            other => Err(Error::Format(format!(
                "expected f64 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

fn header(out: &mut Vec<u8>, dtype: DType, shape: &[usize]) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} exceeds 255", shape.len())));
    }
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

fn encode_real<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    header(out, T::DTYPE, t.shape())?;
    out.reserve(t.len() * T::DTYPE.size_of());
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

pub fn encode(t: &AnyTensor, out: &mut Vec<u8>) -> Result<()> {
    match t {
        AnyTensor::F32(t) => encode_real(t, out),
        AnyTensor::F64(t) => encode_real(t, out),
        AnyTensor::Complex64 { shape, data } => {
            header(out, DType::Complex64, shape)?;
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            Ok(())
        }
    }
}

pub fn to_bytes(t: &AnyTensor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode(t, &mut out)?;
    Ok(out)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::Format(format!("truncated CFT stream ({what})"))
        }
        _ => Error::RawIo(e),
    })
}

/// Reads one tensor; the stream may continue after it.
pub fn decode<R: Read>(r: &mut R) -> Result<AnyTensor> {
    let mut head = [0u8; 7];
    read_exact(r, &mut head, "header")?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("bad CFT magic {:?}", &head[..4])));
    }
    if head[4] != VERSION {
        return Err(Error::Version {
            what: "CFT",
            found: head[4],
            expected: VERSION,
        });
    }
    let dtype = DType::from_code(head[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", head[5])))?;
    let rank = head[6] as usize;
    let mut dims = vec![0u8; rank * 4];
    read_exact(r, &mut dims, "dims")?;
    let shape: Vec<usize> = dims
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(Error::Format(format!("zero dim in {shape:?}")));
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * dtype.size_of()];
    read_exact(r, &mut payload, "payload")?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(Tensor::from_parts(
            shape,
            payload.chunks(4).map(f32::read_le).collect(),
        )),
        DType::F64 => AnyTensor::F64(Tensor::from_parts(
            shape,
            payload.chunks(8).map(f64::read_le).collect(),
        )),
        DType::Complex64 => AnyTensor::Complex64 {
            shape,
            data: payload.chunks(4).map(f32::read_le).collect(),
        },
    })
}

pub fn save(path: &Path, t: &AnyTensor) -> Result<()> {
    let bytes = to_bytes(t)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<AnyTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = bytes.as_slice();
    let t = decode(&mut cur)?;
    if !cur.is_empty() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes",
            path.display(),
            cur.len()
        )));
    }
    Ok(t)
}

pub fn save_f32(path: &Path, t: &Tensor<f32>) -> Result<()> {
    save(path, &AnyTensor::F32(t.clone()))
}

pub fn load_f32(path: &Path) -> Result<Tensor<f32>> {
    load(path)?.into_f32()
}
