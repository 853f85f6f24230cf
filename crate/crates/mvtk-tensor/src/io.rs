//! Binary tensor format: magic `MVTK`, u8 version=1, u8 dtype (0=f32, 1=f64),
//! u32 rank, rank x u64 dims, then raw little-endian scalars.

use std::io::{Read, Write};

use crate::element::{Dtype, Element};
use crate::error::{Result, TensorError};
use crate::shape::Shape;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MVTK";
pub const VERSION: u8 = 1;

pub fn write_tensor<T: Element, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(4 + 2 + 4 + 32 + t.numel() * T::DTYPE.byte_width());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(T::DTYPE as u8);
    buf.extend_from_slice(&4u32.to_le_bytes());
    for &d in &t.shape().0 {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<T: Element, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let mut head = [0u8; 10];
    read_exact(r, &mut head)?;
    if &head[0..4] != MAGIC {
        return Err(TensorError::Format(format!(
            "bad magic {:02x?}, expected \"MVTK\"",
            &head[0..4]
        )));
    }
    if head[4] != VERSION {
        return Err(TensorError::Format(format!("unsupported version {}", head[4])));
    }
    let dtype = Dtype::from_u8(head[5])
        .ok_or_else(|| TensorError::Format(format!("unknown dtype tag {}", head[5])))?;
    if dtype != T::DTYPE {
        return Err(TensorError::Format(format!(
            "dtype mismatch: file has {:?}, expected {:?}",
            dtype,
            T::DTYPE
        )));
    }
    let rank = u32::from_le_bytes([head[6], head[7], head[8], head[9]]) as usize;
    if rank == 0 || rank > 4 {
        return Err(TensorError::Format(format!("unsupported rank {rank}")));
    }
    let mut dims = [1usize; 4];
    for slot in dims.iter_mut().take(rank) {
        let mut b = [0u8; 8];
        read_exact(r, &mut b)?;
        *slot = u64::from_le_bytes(b) as usize;
    }
    let shape = Shape(dims);
    let width = T::DTYPE.byte_width();
    let mut raw = vec![0u8; shape.numel() * width];
    read_exact(r, &mut raw)?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(shape, data)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| TensorError::Format(format!("truncated tensor file: {e}")))
}
