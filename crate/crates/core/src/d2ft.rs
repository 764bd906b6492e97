//! The D2FT tensor file format.
//!
//! Layout, all little-endian: magic `D2FT`, u32 version (currently 1),
//! u32 rank, rank u32 extents, then row-major f32 payload. Readers reject
//! wrong magic, unknown versions, rank 0, zero extents, payload length
//! mismatches, and non-finite values. Writers go through a temp file and
//! rename, so a failed write never leaves partial output behind.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"D2FT";
pub const VERSION: u32 = 1;

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let shape = t.shape();
    let mut out = Vec::with_capacity(12 + shape.len() * 4 + t.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(Error::format("truncated tensor file"));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let read_u32 = |at: &mut usize| -> Result<u32> {
        let b = take(at, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };

    if take(&mut at, 4)? != MAGIC {
        return Err(Error::format("bad magic, not a D2FT file"));
    }
    let version = read_u32(&mut at)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported version {version}")));
    }
    let rank = read_u32(&mut at)? as usize;
    if rank == 0 {
        return Err(Error::shape("rank-0 tensor file"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u128 = 1;
    for _ in 0..rank {
        let e = read_u32(&mut at)? as usize;
        if e == 0 {
            return Err(Error::shape("zero extent in tensor file"));
        }
        numel *= e as u128;
        shape.push(e);
    }
    let remaining = (bytes.len() - at) as u128;
    if remaining != numel * 4 {
        return Err(Error::format(format!(
            "payload is {remaining} bytes, shape {shape:?} wants {}",
            numel * 4
        )));
    }
    let mut data = Vec::with_capacity(numel as usize);
    for chunk in bytes[at..].chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Tensor::new(&shape, data)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    from_bytes(&fs::read(path)?)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    atomic_write(path, &to_bytes(t))
}

/// Writes via a sibling temp file plus rename; on any error the destination
/// is left untouched.
pub fn atomic_write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    if let Err(e) = fs::write(&tmp, bytes).and_then(|()| fs::rename(&tmp, path)) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}
