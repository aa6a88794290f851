//! `.rcdt` tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "RCDT"
//! version u16      1
//! rank    u16      1..=4
//! dims    rank × u32
//! payload product(dims) × f64
//! ```
//!
//! A file may hold several records back to back (a feature pyramid, a set of
//! gradients). [`read_tensor`] accepts exactly one record; [`read_tensors`]
//! reads records until the input is exhausted.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: [u8; 4] = *b"RCDT";
pub const VERSION: u16 = 1;
pub const EXTENSION: &str = "rcdt";

const PREFIX_LEN: usize = 8;

pub fn write_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREFIX_LEN + 4 * t.rank() + 8 * t.len());
    append_record(&mut out, t);
    out
}

pub fn write_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        append_record(&mut out, t);
    }
    out
}

fn append_record(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u16).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Parses a single-record file. Trailing bytes are rejected.
pub fn read_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = read_record(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after a single tensor record",
            bytes.len() - used
        )));
    }
    Ok(t)
}

/// Parses one or more consecutive records.
pub fn read_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    let mut rest = bytes;
    loop {
        let (t, used) = read_record(rest)?;
        out.push(t);
        rest = &rest[used..];
        if rest.is_empty() {
            return Ok(out);
        }
    }
}

fn need(bytes: &[u8], n: usize) -> Result<()> {
    if bytes.len() < n {
        return Err(Error::Truncated {
            expected: n,
            actual: bytes.len(),
        });
    }
    Ok(())
}

fn read_record(bytes: &[u8]) -> Result<(Tensor, usize)> {
    need(bytes, 4)?;
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    need(bytes, PREFIX_LEN)?;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    let header = PREFIX_LEN + 4 * rank;
    need(bytes, header)?;
    let dims: Vec<usize> = bytes[PREFIX_LEN..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(Error::Format(format!("zero extent in dims {dims:?}")));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
    let total = header + count;
    need(bytes, total)?;
    let data = bytes[header..total]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::new(&dims, data)?, total))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(&fs::read(path)?)
}

pub fn load_all(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    read_tensors(&fs::read(path)?)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, write_tensor(t))?;
    Ok(())
}

pub fn save_all<'a>(
    path: impl AsRef<Path>,
    tensors: impl IntoIterator<Item = &'a Tensor>,
) -> Result<()> {
    fs::write(path, write_tensors(tensors))?;
    Ok(())
}
