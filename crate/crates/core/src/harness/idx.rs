//! IDX files: two zero bytes, a type code, a dimension count, big-endian
//! `u32` extents, then the raw row-major payload.

use std::path::Path;

use crate::error::{Error, Result};

pub const TYPE_U8: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Idx {
        offset,
        msg: msg.into(),
    }
}

/// Parse an unsigned-byte IDX buffer.
pub fn parse(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(err(bytes.len(), "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(0, format!("bad magic {:02x}{:02x}, expected 0000", bytes[0], bytes[1])));
    }
    if bytes[2] != TYPE_U8 {
        return Err(err(2, format!("unsupported element type 0x{:02x}, only 0x08 (u8)", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(err(3, "zero dimensions"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(err(bytes.len(), format!("truncated header: {rank} dimensions need {header} bytes")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        })
        .collect();
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| err(4, "dimension product overflows"))?;
    let have = bytes.len() - header;
    if have != n {
        return Err(err(
            header + have.min(n),
            format!("payload has {have} bytes, dimensions {dims:?} need {n}"),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn read(path: &Path) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    parse(&bytes)
}

pub fn encode(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, TYPE_U8, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

pub fn write(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    std::fs::write(path, encode(dims, data)).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}
