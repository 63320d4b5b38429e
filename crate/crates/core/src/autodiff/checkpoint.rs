//! Portable parameter checkpoints.
//!
//! Layout (all little-endian): magic `LSWT`, `u32` tensor count, then per
//! tensor a `u32` rank, `rank` `u32` dims and the raw `f32` values.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LSWT";

pub fn write_checkpoint(path: impl AsRef<Path>, tensors: &[Tensor<f32>]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode(tensors))?;
    w.flush()?;
    Ok(())
}

pub fn encode(tensors: &[Tensor<f32>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<Tensor<f32>>> {
    decode(&fs::read(path)?)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor<f32>>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::MalformedHeader("truncated checkpoint".into()));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::MalformedHeader("missing LSWT magic".into()));
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let count = u32_of(take(4)?);
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let rank = u32_of(take(4)?);
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(u32_of(take(4)?));
        }
        let n: usize = shape.iter().product();
        let raw = take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor { shape, data });
    }
    if pos != bytes.len() {
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - pos
        )));
    }
    Ok(tensors)
}
