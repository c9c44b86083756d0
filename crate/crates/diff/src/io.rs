//! `.vtsr` tensor files: a 16-byte header (`b"VTSR1\0\0\0"`, little-endian
//! u32 rank, little-endian u32 dtype code, 0 = f32), `rank` little-endian u32
//! dimensions, then the values as little-endian f32 in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{DiffError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VTSR1\0\0\0";
const DTYPE_F32: u32 = 0;

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<Tensor<f32>> {
    let bad = |detail: &str| DiffError::Format {
        path: origin.to_string(),
        detail: detail.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing VTSR1 header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let rank = u32_at(8) as usize;
    if u32_at(12) != DTYPE_F32 {
        return Err(bad("unsupported dtype"));
    }
    let data_at = 16 + 4 * rank;
    if bytes.len() < data_at {
        return Err(bad("truncated shape"));
    }
    let shape: Vec<usize> = (0..rank).map(|i| u32_at(16 + 4 * i) as usize).collect();
    let n: usize = shape.iter().product();
    if bytes.len() != data_at + 4 * n {
        return Err(bad(&format!("expected {n} values for shape {shape:?}")));
    }
    let data = bytes[data_at..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data)
}

/// Writes via a sibling temp file and rename, so readers never see a
/// half-written tensor.
pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let tmp = path.with_extension("vtsr.partial");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| DiffError::io(&tmp, e))?;
        f.write_all(&encode(t)).map_err(|e| DiffError::io(&tmp, e))?;
        f.sync_all().map_err(|e| DiffError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| DiffError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| DiffError::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
