//! SGDT binary tensor container.
//!
//! Layout: 8 magic bytes `SGDT0001`, one u8 dtype code (0 = f32, 1 = f64,
//! 2 = u8, 3 = i16), a u32 rank, rank u32 extents, then the raw row-major
//! payload. Every multi-byte integer and float is little-endian. Used for
//! weight checkpoints, fixtures, and preprocessed volumes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SGDT0001";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
    I16,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
            DType::I16 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            3 => Ok(DType::I16),
            other => Err(Error::parse(format!("unknown SGDT dtype code {other}"))),
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
            DType::I16 => 2,
        }
    }
}

/// Payload of one SGDT file, preserving the stored element type.
#[derive(Debug, Clone, PartialEq)]
pub enum SgdtData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I16(Vec<i16>),
}

impl SgdtData {
    pub fn dtype(&self) -> DType {
        match self {
            SgdtData::F32(_) => DType::F32,
            SgdtData::F64(_) => DType::F64,
            SgdtData::U8(_) => DType::U8,
            SgdtData::I16(_) => DType::I16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SgdtData::F32(v) => v.len(),
            SgdtData::F64(v) => v.len(),
            SgdtData::U8(v) => v.len(),
            SgdtData::I16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sgdt {
    pub shape: Vec<usize>,
    pub data: SgdtData,
}

impl Sgdt {
    pub fn from_tensor(t: &Tensor) -> Self {
        Sgdt {
            shape: t.shape().to_vec(),
            data: SgdtData::F64(t.data().to_vec()),
        }
    }

    /// Widen any stored dtype to an f64 [`Tensor`].
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data: Vec<f64> = match &self.data {
            SgdtData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            SgdtData::F64(v) => v.clone(),
            SgdtData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            SgdtData::I16(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }
}

pub fn write_sgdt(path: &Path, t: &Sgdt) -> Result<()> {
    let numel: usize = t.shape.iter().product();
    if numel != t.data.len() {
        return Err(Error::shape(format!(
            "SGDT shape {:?} holds {numel} elements but payload has {}",
            t.shape,
            t.data.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[t.data.dtype().code()])?;
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &e in &t.shape {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    match &t.data {
        SgdtData::F32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        SgdtData::F64(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        SgdtData::U8(v) => w.write_all(v)?,
        SgdtData::I16(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_sgdt(path: &Path) -> Result<Sgdt> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::parse(format!(
            "{}: bad SGDT magic {magic:?}",
            path.display()
        )));
    }
    let mut byte = [0u8; 1];
    read_exact(&mut r, &mut byte, path)?;
    let dtype = DType::from_code(byte[0])?;
    let mut u32buf = [0u8; 4];
    read_exact(&mut r, &mut u32buf, path)?;
    let ndim = u32::from_le_bytes(u32buf) as usize;
    if ndim > 8 {
        return Err(Error::parse(format!(
            "{}: implausible SGDT rank {ndim}",
            path.display()
        )));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        read_exact(&mut r, &mut u32buf, path)?;
        let e = u32::from_le_bytes(u32buf) as usize;
        if e == 0 {
            return Err(Error::parse(format!(
                "{}: zero extent in SGDT shape",
                path.display()
            )));
        }
        shape.push(e);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * dtype.byte_width()];
    read_exact(&mut r, &mut payload, path)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::parse(format!(
            "{}: trailing bytes after SGDT payload",
            path.display()
        )));
    }
    let data = match dtype {
        DType::F32 => SgdtData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => SgdtData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::U8 => SgdtData::U8(payload),
        DType::I16 => SgdtData::I16(
            payload
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(Sgdt { shape, data })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::parse(format!("{}: truncated SGDT file", path.display()))
        } else {
            Error::Io(e)
        }
    })
}
