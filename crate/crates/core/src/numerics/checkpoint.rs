//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`, reals little-endian `f32`):
//!
//! ```text
//! "DFP1" | version: u8 | count | count × { name_len | name (UTF-8) | rank | dims[rank] | values }
//! ```
//!
//! Optimizer moments are not stored.

use std::io::{Read, Write};

use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DFP1";
pub const VERSION: u8 = 1;

pub fn write_parameters<W: Write>(store: &ParameterStore, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&[VERSION])?;
    write_u32(&mut out, store.len())?;
    for (name, tensor) in store.iter() {
        write_u32(&mut out, name.len())?;
        out.write_all(name.as_bytes())?;
        write_u32(&mut out, tensor.rank())?;
        for &d in tensor.shape() {
            write_u32(&mut out, d)?;
        }
        let mut buf = Vec::with_capacity(tensor.len() * 4);
        for v in tensor.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_parameters<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let mut version = [0u8; 1];
    read_exact(&mut input, &mut version, "version")?;
    if version[0] != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version[0],
            expected: VERSION,
        });
    }
    let count = read_u32(&mut input, "parameter count")?;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = read_u32(&mut input, "name length")?;
        if name_len > 4096 {
            return Err(Error::CorruptCheckpoint(format!("name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        read_exact(&mut input, &mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::CorruptCheckpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut input, "rank")?;
        if rank > 8 {
            return Err(Error::CorruptCheckpoint(format!("rank {rank} for {name}")));
        }
        let shape = (0..rank)
            .map(|_| read_u32(&mut input, "dimension"))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= 1 << 30)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("implausible shape {shape:?}")))?;
        let mut raw = vec![0u8; len * 4];
        read_exact(&mut input, &mut raw, "values")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push((name, Tensor::new(shape, values)?));
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::CorruptCheckpoint("trailing bytes after last parameter".into()));
    }
    Ok(params)
}

fn write_u32<W: Write>(out: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid_argument("value exceeds u32"))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R, what: &str) -> Result<usize> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::CorruptCheckpoint(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}
