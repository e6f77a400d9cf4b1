//! Flat binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"FGTN"
//! u32    version (1)
//! u64    entry count
//! per entry:
//!   u32  name length, then UTF-8 name bytes
//!   u32  rank, then rank × u64 dims
//!   f64  payload, product(dims) values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::nn::ParamSet;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"FGTN";
pub const VERSION: u32 = 1;

/// One named entry of a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_entries<W: Write>(mut w: W, entries: &[NamedTensor]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for e in entries {
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for &d in &e.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
    Ok(buf)
}

pub fn read_entries<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let magic: [u8; 4] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(read_exact(&mut r)?);
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Format(format!("name is not UTF-8: {e}")))?;
        let rank = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_exact(&mut r)?));
        }
        out.push(NamedTensor { name, shape, data });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)
        .map_err(|e| Error::Format(e.to_string()))?
        != 0
    {
        return Err(Error::Format("trailing bytes after last entry".into()));
    }
    Ok(out)
}

pub fn save_entries(path: &Path, entries: &[NamedTensor]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_entries(BufWriter::new(f), entries).map_err(|e| Error::io(path, e))
}

pub fn load_entries(path: &Path) -> Result<Vec<NamedTensor>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_entries(BufReader::new(f))
}

/// Snapshot of every parameter and buffer, in insertion order.
pub fn params_to_entries<T: Scalar>(params: &ParamSet<T>) -> Vec<NamedTensor> {
    params
        .named()
        .map(|(name, t)| NamedTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.to_f64_vec(),
        })
        .collect()
}

/// Overwrites `params` from file entries; names and shapes must match exactly.
pub fn entries_into_params<T: Scalar>(
    params: &mut ParamSet<T>,
    entries: &[NamedTensor],
) -> Result<()> {
    let tensors = entries
        .iter()
        .map(|e| Ok((e.name.as_str(), Tensor::from_f64(e.shape.clone(), &e.data)?)))
        .collect::<Result<Vec<_>>>()?;
    params.load_values(tensors).map_err(Error::Format)
}
