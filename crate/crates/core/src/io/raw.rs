//! Raw tensor files: magic `WDTN`, `u32` rank, `u64` dims, then the
//! little-endian `f32` payload.

use std::path::Path;

use super::{read_file, ByteReader};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"WDTN";
pub const EXTENSION: &str = "5d";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    out
}

pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let mut r = ByteReader::new(bytes, path);
    if r.bytes(4)? != MAGIC {
        return Err(r.fail("not a raw tensor file (bad magic)"));
    }
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(r.fail(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(usize::try_from(r.u64()?).map_err(|_| r.fail("dimension overflows usize"))?);
    }
    let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let numel = numel.filter(|n| n.checked_mul(4).is_some_and(|b| b == r.remaining()));
    let numel = numel.ok_or_else(|| r.fail(format!("payload of {} bytes does not match dims {shape:?}", r.remaining())))?;
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(T::from_f64_lossy(r.f32()? as f64));
    }
    Tensor::new(&shape, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode(&read_file(path)?, path)
}

pub fn write<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    super::atomic_write(path, &encode(t))
}
