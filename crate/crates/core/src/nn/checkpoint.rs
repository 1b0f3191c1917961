//! DFCK parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DFCK" | version u8 = 1 | tensor count u32
//! per tensor: name length u16 | UTF-8 name | rank u8 | rank × u32 dims | f32 data
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{ParamSet, Tensor};

pub const MAGIC: [u8; 4] = *b"DFCK";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a DFCK checkpoint (magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported DFCK version {0}")]
    UnsupportedVersion(u8),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("duplicate tensor `{0}`")]
    Duplicate(String),
    #[error("tensor `{0}` does not fit the format limits")]
    TooLarge(String),
    #[error("trailing bytes after the last tensor")]
    TrailingBytes,
}

pub fn write_checkpoint<W: Write>(params: &ParamSet<f32>, mut w: W) -> Result<(), CheckpointError> {
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION])?;
    let count = u32::try_from(params.len()).map_err(|_| CheckpointError::TooLarge("*".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| CheckpointError::TooLarge(name.into()))?;
        let rank = u8::try_from(t.rank()).map_err(|_| CheckpointError::TooLarge(name.into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| CheckpointError::TooLarge(name.into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], CheckpointError> {
    if bytes.len() < n {
        return Err(CheckpointError::Truncated);
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn decode_checkpoint(mut bytes: &[u8]) -> Result<ParamSet<f32>, CheckpointError> {
    let b = &mut bytes;
    let magic: [u8; 4] = take(b, 4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = take(b, 1)?[0];
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = u32::from_le_bytes(take(b, 4)?.try_into().expect("4 bytes"));
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(b, 2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(take(b, len)?)
            .map_err(|_| CheckpointError::BadName)?
            .to_owned();
        let rank = take(b, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = u32::from_le_bytes(take(b, 4)?.try_into().expect("4 bytes")) as usize;
            numel = numel.checked_mul(d).ok_or(CheckpointError::Truncated)?;
            shape.push(d);
        }
        let raw = take(b, numel.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).expect("length checked");
        if params.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Duplicate(name));
        }
    }
    if !b.is_empty() {
        return Err(CheckpointError::TrailingBytes);
    }
    Ok(params)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamSet<f32>, CheckpointError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

pub fn save_checkpoint(params: &ParamSet<f32>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet<f32>, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}
