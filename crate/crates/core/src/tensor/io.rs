//! `AGTD` tensor files: magic, `u32` version, `u32` rank, `u32` dims, then
//! row-major little-endian `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"AGTD";
pub const TENSOR_VERSION: u32 = 1;

/// Rank and element count limits guarding against corrupt headers.
const MAX_RANK: u32 = 8;
const MAX_ELEMENTS: u64 = 1 << 31;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "tensor",
        msg: msg.into(),
    }
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor<f32>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| format_err(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(format_err(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != TENSOR_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let rank = read_u32(&mut r)?;
    if rank == 0 || rank > MAX_RANK {
        return Err(format_err(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel = 1u64;
    for _ in 0..rank {
        let d = read_u32(&mut r)?;
        numel = numel.saturating_mul(d as u64);
        shape.push(d as usize);
    }
    if numel == 0 || numel > MAX_ELEMENTS {
        return Err(format_err(format!("invalid shape {shape:?}")));
    }
    let mut bytes = vec![0u8; numel as usize * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::data(path, e.to_string()))?;
    read_tensor(BufReader::new(file))
}
