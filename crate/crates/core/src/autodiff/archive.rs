//! Named-tensor checkpoint archive.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! magic    8 bytes  "PGNNARCH"
//! version  u32      currently 1
//! n_meta   u32      then n_meta × (u32 len, utf8 key, u32 len, utf8 value)
//! n_tensor u32      then n_tensor × tensor record
//! tensor:  u32 len, utf8 name, u32 ndim, ndim × u64 dims, prod(dims) × f64
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::Array2;

use super::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PGNNARCH";
pub const VERSION: u32 = 1;

pub type Metadata = BTreeMap<String, String>;

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Archive(format!("truncated archive: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Archive(format!("truncated archive: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Archive(format!("truncated string: {e}")))?;
    String::from_utf8(buf).map_err(|_| Error::Archive("non-utf8 string".into()))
}

pub fn write_archive(w: &mut impl Write, params: &ParamStore, meta: &Metadata) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    for (k, v) in meta {
        write_str(w, k)?;
        write_str(w, v)?;
    }
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, m) in params.iter() {
        write_str(w, name)?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(m.nrows() as u64).to_le_bytes())?;
        w.write_all(&(m.ncols() as u64).to_le_bytes())?;
        for x in m.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_archive(r: &mut impl Read) -> Result<(ParamStore, Metadata)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Archive("missing header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Archive("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Archive(format!("unsupported version {version}")));
    }
    let mut meta = Metadata::new();
    for _ in 0..read_u32(r)? {
        let k = read_str(r)?;
        let v = read_str(r)?;
        meta.insert(k, v);
    }
    let mut params = ParamStore::new();
    for _ in 0..read_u32(r)? {
        let name = read_str(r)?;
        let ndim = read_u32(r)? as usize;
        let dims: Vec<usize> = (0..ndim)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<_>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(Error::Archive(format!("tensor `{name}` has {ndim} dims"))),
        };
        let mut data = vec![0.0; rows * cols];
        let mut b = [0u8; 8];
        for x in &mut data {
            r.read_exact(&mut b)
                .map_err(|_| Error::Archive(format!("truncated data for `{name}`")))?;
            *x = f64::from_le_bytes(b);
        }
        let m = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Archive(e.to_string()))?;
        params.insert(name, m);
    }
    Ok((params, meta))
}

pub fn save(path: impl AsRef<std::path::Path>, params: &ParamStore, meta: &Metadata) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_archive(&mut w, params, meta)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<std::path::Path>) -> Result<(ParamStore, Metadata)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_archive(&mut r)
}
