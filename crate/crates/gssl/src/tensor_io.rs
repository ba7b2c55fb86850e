//! `GTSR` binary tensor files.
//!
//! Layout: the magic bytes `GTSR`, a version byte (1), a dtype byte, a rank
//! byte, `rank` little-endian `u64` extents and then the row-major payload in
//! little-endian order.

use std::io::{Read, Write};
use std::path::Path;

use gssl_core::Tensor;

use crate::error::{IoError, Result};

pub const MAGIC: [u8; 4] = *b"GTSR";
pub const VERSION: u8 = 1;
const HEADER: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    I32 = 3,
}

impl DType {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Self::F32),
            1 => Some(Self::F64),
            2 => Some(Self::U8),
            3 => Some(Self::I32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::F32 | Self::I32 => 4,
            Self::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl Data {
    pub fn dtype(&self) -> DType {
        match self {
            Self::F32(_) => DType::F32,
            Self::F64(_) => DType::F64,
            Self::U8(_) => DType::U8,
            Self::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
            Self::U8(v) => v.len(),
            Self::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A typed, shaped array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Stored {
    pub shape: Vec<usize>,
    pub data: Data,
}

impl Stored {
    pub fn new(shape: Vec<usize>, data: Data) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(IoError::Format {
                offset: 0,
                reason: format!("shape {shape:?} holds {n} elements, data has {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn f64(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: Data::F64(t.data().to_vec()),
        }
    }

    /// Rounds to the nearest `f32`.
    pub fn f32(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: Data::F32(t.data().iter().map(|&x| x as f32).collect()),
        }
    }

    /// Stores a tensor whose values are multiples of 1/255 in `[0, 1]` as
    /// bytes. Any other value is rejected.
    pub fn u8_image(t: &Tensor) -> Result<Self> {
        let mut bytes = Vec::with_capacity(t.len());
        for &v in t.data() {
            let q = (v * 255.0).round();
            if !(0.0..=255.0).contains(&q) || q / 255.0 != v {
                return Err(IoError::Invalid(format!("value {v} is not a byte level")));
            }
            bytes.push(q as u8);
        }
        Ok(Self {
            shape: t.shape().to_vec(),
            data: Data::U8(bytes),
        })
    }

    /// Converts to an `f64` tensor; bytes are scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data: Vec<f64> = match &self.data {
            Data::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Data::F64(v) => v.clone(),
            Data::U8(v) => v.iter().map(|&x| f64::from(x) / 255.0).collect(),
            Data::I32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        };
        Ok(Tensor::new(self.shape.clone(), data)?)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let rank = u8::try_from(self.shape.len())
            .map_err(|_| IoError::Invalid(format!("rank {} does not fit a byte", self.shape.len())))?;
        let mut out = Vec::with_capacity(HEADER + 8 * self.shape.len() + self.data.len() * self.data.dtype().size());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.data.dtype() as u8);
        out.push(rank);
        for &e in &self.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match &self.data {
            Data::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Data::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Data::U8(v) => out.extend_from_slice(v),
            Data::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, reason: String| IoError::Format { offset, reason };
        let need = |offset: usize, n: usize, what: &str| {
            if bytes.len() < offset + n {
                Err(fail(offset, format!("truncated {what}: need {n} bytes, {} left", bytes.len().saturating_sub(offset))))
            } else {
                Ok(())
            }
        };
        need(0, 4, "magic")?;
        if bytes[..4] != MAGIC {
            return Err(fail(0, format!("bad magic {:?}", &bytes[..4])));
        }
        need(4, 1, "version")?;
        if bytes[4] != VERSION {
            return Err(fail(4, format!("unsupported version {}", bytes[4])));
        }
        need(5, 1, "dtype")?;
        let dtype = DType::from_byte(bytes[5]).ok_or_else(|| fail(5, format!("unknown dtype {}", bytes[5])))?;
        need(6, 1, "rank")?;
        let rank = bytes[6] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut pos = HEADER;
        for _ in 0..rank {
            need(pos, 8, "extent")?;
            let e = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
            shape.push(usize::try_from(e).map_err(|_| fail(pos, format!("extent {e} too large")))?);
            pos += 8;
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| fail(HEADER, format!("element count of {shape:?} overflows")))?;
        let size = n
            .checked_mul(dtype.size())
            .ok_or_else(|| fail(HEADER, format!("payload of {shape:?} overflows")))?;
        need(pos, size, "payload")?;
        if bytes.len() != pos + size {
            return Err(fail(pos + size, format!("{} trailing bytes", bytes.len() - pos - size)));
        }
        let payload = &bytes[pos..pos + size];
        let data = match dtype {
            DType::F32 => Data::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => Data::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U8 => Data::U8(payload.to_vec()),
            DType::I32 => Data::I32(payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(Self { shape, data })
    }
}

pub fn write_tensor(path: &Path, t: &Stored) -> Result<()> {
    let bytes = t.encode()?;
    let mut f = std::fs::File::create(path).map_err(|e| IoError::path(path, e))?;
    f.write_all(&bytes).map_err(|e| IoError::path(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Stored> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| IoError::path(path, e))?;
    Stored::decode(&bytes).map_err(|e| e.in_file(path))
}
