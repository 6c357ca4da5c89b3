//! Binary tensor container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! [magic:   4 bytes]  "RGTN"
//! [version: u16    ]  1
//! [dtype:   u8     ]  0 = f32, 1 = f16, 2 = f64
//! [rank:    u8     ]
//! [extents: u32 × rank]
//! [payload: dtype-sized scalars, row-major]
//! ```
//!
//! Used for feature dumps, trained parameters and V2X payload bodies.

use half::f16;

use crate::error::{CoreError, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: [u8; 4] = *b"RGTN";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F16,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F16 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F16),
            2 => Ok(Dtype::F64),
            other => Err(CoreError::Container(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F16 => "f16",
            Dtype::F64 => "f64",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "f32" => Ok(Dtype::F32),
            "f16" => Ok(Dtype::F16),
            "f64" => Ok(Dtype::F64),
            other => Err(CoreError::Container(format!("unknown dtype `{other}`"))),
        }
    }
}

/// Header length in bytes for a given rank.
pub fn header_len(rank: usize) -> usize {
    4 + 2 + 1 + 1 + 4 * rank
}

/// Total container size for a shape and dtype, exactly.
pub fn container_len(shape: &[usize], dtype: Dtype) -> usize {
    header_len(shape.len()) + shape.iter().product::<usize>() * dtype.size()
}

/// Serializes a tensor at the requested storage precision.
pub fn encode(tensor: &Tensor, dtype: Dtype) -> Vec<u8> {
    let shape = tensor.shape();
    let mut out = Vec::with_capacity(container_len(shape, dtype));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => {
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F16 => {
            for &v in tensor.data() {
                out.extend_from_slice(&f16::from_f64(v as f64).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f64).to_le_bytes());
            }
        }
    }
    out
}

/// Parses a container produced by [`encode`]. Fails on bad magic, unknown
/// version or dtype, and any length mismatch.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, Dtype)> {
    if bytes.len() < 8 {
        return Err(CoreError::Container("truncated header".into()));
    }
    if bytes[0..4] != MAGIC {
        return Err(CoreError::Container("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(CoreError::Container(format!("unsupported version {version}")));
    }
    let dtype = Dtype::from_code(bytes[6])?;
    let rank = bytes[7] as usize;
    let hlen = header_len(rank);
    if bytes.len() < hlen {
        return Err(CoreError::Container("truncated extents".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 4 * i;
        shape.push(u32::from_le_bytes([
            bytes[off],
            bytes[off + 1],
            bytes[off + 2],
            bytes[off + 3],
        ]) as usize);
    }
    let numel: usize = shape.iter().product();
    let expected = hlen + numel * dtype.size();
    if bytes.len() != expected {
        return Err(CoreError::Container(format!(
            "length mismatch: expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let payload = &bytes[hlen..];
    let mut data = Vec::with_capacity(numel);
    match dtype {
        Dtype::F32 => {
            for chunk in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as Real);
            }
        }
        Dtype::F16 => {
            for chunk in payload.chunks_exact(2) {
                data.push(f16::from_le_bytes(chunk.try_into().unwrap()).to_f64() as Real);
            }
        }
        Dtype::F64 => {
            for chunk in payload.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()) as Real);
            }
        }
    }
    Ok((Tensor::new(shape, data)?, dtype))
}
