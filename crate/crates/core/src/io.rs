//! File formats: GTSR tensor blocks and PGM/PPM image previews.
//!
//! GTSR layout (little-endian):
//!
//! | field   | type            |
//! |---------|-----------------|
//! | magic   | `b"GTSR"`       |
//! | version | u32 = 1         |
//! | dtype   | u32 (0=f32, 1=f64) |
//! | ndim    | u32             |
//! | dims    | ndim × u64      |
//! | payload | row-major values |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GTSR_MAGIC: &[u8; 4] = b"GTSR";
pub const GTSR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

pub fn encode_tensor(t: &Tensor, dtype: DType) -> Vec<u8> {
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut out = Vec::with_capacity(16 + 8 * t.ndim() + width * t.len());
    out.extend_from_slice(GTSR_MAGIC);
    out.extend_from_slice(&GTSR_VERSION.to_le_bytes());
    out.extend_from_slice(&(dtype as u32).to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Data("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_tensor(buf: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != GTSR_MAGIC {
        return Err(Error::Data("bad GTSR magic".into()));
    }
    let version = r.u32()?;
    if version != GTSR_VERSION {
        return Err(Error::Data(format!("unsupported GTSR version {version}")));
    }
    let dtype = r.u32()?;
    let ndim = r.u32()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Data("dim overflow".into()))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Data("element count overflow".into()))?;
    let data = match dtype {
        0 => r
            .take(n.checked_mul(4).ok_or_else(|| Error::Data("size overflow".into()))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        1 => r
            .take(n.checked_mul(8).ok_or_else(|| Error::Data("size overflow".into()))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        other => return Err(Error::Data(format!("unknown GTSR dtype {other}"))),
    };
    if r.pos != buf.len() {
        return Err(Error::Data("trailing bytes after GTSR payload".into()));
    }
    Tensor::new(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t, DType::F64)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&buf).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// 16-bit binary PGM of a depth map in millimetres (saturating at 65535).
pub fn encode_depth_pgm(depth_m: &[f64], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &d in depth_m {
        let mm = (d * 1000.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&mm.to_be_bytes());
    }
    out
}

/// Binary PPM from RGB values in `[0, 1]`.
pub fn encode_ppm(rgb: &[[f64; 3]], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in rgb {
        for &c in px {
            out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub(crate) fn read_f64(buf: &[u8], pos: &mut usize) -> Result<f64> {
    let mut r = Reader { buf, pos: *pos };
    let v = r.f64()?;
    *pos = r.pos;
    Ok(v)
}

pub(crate) fn read_u32(buf: &[u8], pos: &mut usize) -> Result<u32> {
    let mut r = Reader { buf, pos: *pos };
    let v = r.u32()?;
    *pos = r.pos;
    Ok(v)
}
