//! DSPR parameter checkpoints.
//!
//! Little-endian layout: magic `DSPR`, `u16` version, `u32` record count,
//! then per record a `u16` name length, the UTF-8 name, a `u8` rank, one
//! `u32` per dimension and the values as row-major `f32`.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const DSPR_MAGIC: &[u8; 4] = b"DSPR";
pub const DSPR_VERSION: u16 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DSPR_MAGIC);
    out.extend_from_slice(&DSPR_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, value) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        out.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
        for v in value.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::CheckpointCorrupt(format!("truncated while reading {what}")));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint. Rank-0 and rank-1 records load as `1 × n` rows.
pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic").map_err(|_| Error::CheckpointMagic)? != DSPR_MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let version = cur.u16("version")?;
    if version != DSPR_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: DSPR_VERSION,
        });
    }
    let count = cur.u32("record count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::CheckpointCorrupt("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u8("rank")?;
        let dims = (0..rank)
            .map(|_| cur.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let shape = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::CheckpointCorrupt(format!(
                    "{name}: rank {rank} tensors are not supported"
                )))
            }
        };
        let n = shape.0 * shape.1;
        let raw = cur.take(n * 4, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        store.insert(name, Array2::from_shape_vec(shape, data).expect("length checked"));
    }
    if cur.pos != bytes.len() {
        return Err(Error::CheckpointCorrupt("trailing bytes after last record".into()));
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    if let Some(parent) = path.as_ref().parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, encode(store))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    decode(&fs::read(path)?)
}
