//! JCAT binary tensor files.
//!
//! Layout: `b"JCAT"`, version byte (1), element-type byte (0 = f32,
//! 1 = f64), rank byte, `rank` little-endian u32 dimensions, then the
//! row-major little-endian payload.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"JCAT";
pub const VERSION: u8 = 1;

/// A tensor of whichever element type the file declared.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Ok(t),
            AnyTensor::F64(_) => Err(Error::Format("expected f32 payload, found f64".into())),
        }
    }

    pub fn into_f64(self) -> Result<Tensor<f64>> {
        match self {
            AnyTensor::F64(t) => Ok(t),
            AnyTensor::F32(_) => Err(Error::Format("expected f64 payload, found f32".into())),
        }
    }
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Format(format!("rank {} does not fit in a byte", t.rank())))?;
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + T::BYTES * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE);
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    Ok(out)
}

pub fn write<T: Element, W: Write>(t: &Tensor<T>, mut writer: W) -> Result<()> {
    writer.write_all(&encode(t)?)?;
    Ok(())
}

pub fn read<R: Read>(mut reader: R) -> Result<AnyTensor> {
    let mut header = [0u8; 7];
    reader.read_exact(&mut header)?;
    if &header[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &header[..4])));
    }
    if header[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", header[4])));
    }
    let dtype = header[5];
    let rank = header[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut dim = [0u8; 4];
        reader.read_exact(&mut dim)?;
        shape.push(u32::from_le_bytes(dim) as usize);
    }
    match dtype {
        0 => read_payload::<f32, _>(&mut reader, shape).map(AnyTensor::F32),
        1 => read_payload::<f64, _>(&mut reader, shape).map(AnyTensor::F64),
        other => Err(Error::Format(format!("unknown element type {other}"))),
    }
}

fn read_payload<T: Element, R: Read>(reader: &mut R, shape: Vec<usize>) -> Result<Tensor<T>> {
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let bytes_len = numel
        .checked_mul(T::BYTES)
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let mut bytes = Vec::new();
    reader.take(bytes_len as u64).read_to_end(&mut bytes)?;
    if bytes.len() != bytes_len {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("payload truncated: expected {bytes_len} bytes, got {}", bytes.len()),
        )));
    }
    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save<T: Element>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let file = fs::File::open(path)?;
    read(io::BufReader::new(file))
}

pub fn load_f32(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    load(path)?.into_f32()
}
