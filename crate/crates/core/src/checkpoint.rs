//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RDUN"                      magic
//! u32                         format version
//! u32                         entry count
//! per entry:
//!   u32 + bytes               parameter name (UTF-8)
//!   u64                       element count
//!   u32 + u64 * rank          shape rank and dims
//! per entry, manifest order:
//!   f64 * element count       row-major payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"RDUN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serializes every entry of `store` (running statistics included).
pub fn write_checkpoint<T: Scalar, W: Write>(store: &ParamStore<T>, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, e) in store.entries() {
        let name = e.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&(e.value.len() as u64).to_le_bytes())?;
        let dims = e.value.shape().dims();
        out.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for (_, e) in store.entries() {
        let mut buf = Vec::with_capacity(8 * e.value.len());
        for v in e.value.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(store, std::io::BufWriter::new(file))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                reason: format!("truncated checkpoint while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint into its entries.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<CheckpointEntry>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            reason: "missing RDUN magic".into(),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            reason: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = c.u32("entry count")? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Parse {
                offset: at,
                reason: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let numel = c.u64("element count")? as usize;
        let rank = c.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| c.u64("dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims.iter().product::<usize>() != numel {
            return Err(Error::Parse {
                offset: c.pos,
                reason: format!("{name}: dims {dims:?} disagree with element count {numel}"),
            });
        }
        manifest.push((name, numel, dims));
    }
    let mut entries = Vec::with_capacity(manifest.len());
    for (name, numel, dims) in manifest {
        let raw = c.take(numel * 8, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        entries.push(CheckpointEntry { name, dims, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::Parse {
            offset: c.pos,
            reason: "trailing bytes after payload".into(),
        });
    }
    Ok(entries)
}

/// Loads checkpoint values into `store`. Every registered parameter must be
/// present with an identical shape; errors name the offending parameter.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, entries: &[CheckpointEntry]) -> Result<()> {
    if entries.len() != store.len() {
        let missing = store
            .entries()
            .map(|(_, e)| e.name.as_str())
            .find(|n| !entries.iter().any(|c| c.name == *n));
        let detail = match missing {
            Some(name) => format!("parameter {name} missing from checkpoint"),
            None => "checkpoint has extra parameters".to_string(),
        };
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, model has {}: {detail}",
            entries.len(),
            store.len()
        )));
    }
    for e in entries {
        let id = store
            .lookup(&e.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", e.name)))?;
        let expected = store.shape_of(id);
        if e.dims.as_slice() != expected.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter {}: checkpoint shape {:?}, model shape {expected}",
                e.name, e.dims
            )));
        }
        let shape = Shape::new(e.dims[0], e.dims[1], e.dims[2], e.dims[3]);
        let value = Tensor::from_vec(shape, e.data.iter().map(|&v| T::lit(v)).collect())?;
        store.assign(id, value)?;
    }
    Ok(())
}

pub fn load<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::open(path)?;
    let entries = read_checkpoint(std::io::BufReader::new(file))?;
    load_into(store, &entries)
}
