//! Flat binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "SCMOEPRM"
//! version u32      1
//! count   u32      number of tensors
//! table   count × { name_len u32, name utf-8, rows u32, cols u32 }
//! payload count × rows·cols f64, row-major, in table order
//! ```
//!
//! The structure itself (variant, positions, combine mode) comes from the
//! accompanying JSON [`ModelConfig`].

use std::io::{Read, Write};

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SCMOEPRM";
pub const VERSION: u32 = 1;

pub fn write_params<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    let named = params.named();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32_of(named.len())?.to_le_bytes())?;
    for (name, m) in &named {
        w.write_all(&u32_of(name.len())?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&u32_of(m.rows())?.to_le_bytes())?;
        w.write_all(&u32_of(m.cols())?.to_le_bytes())?;
    }
    for (_, m) in &named {
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated container".into())
    } else {
        Error::Io(e)
    }
}

/// Reads a container and places every tensor into the structure implied by
/// `cfg`. Every parameter must be present exactly once with the right shape.
pub fn read_params<R: Read>(cfg: &ModelConfig, mut r: R) -> Result<ModelParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut params = ModelParams::zeros(cfg)?;
    let expected = params.scalar_count();
    let tensors = params.named().len();
    if count != tensors {
        return Err(Error::Format(format!(
            "container holds {count} tensors, config implies {tensors}"
        )));
    }
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        if len > 4096 {
            return Err(Error::Format(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not utf-8".into()))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        table.push((name, rows, cols));
    }
    let mut seen = std::collections::HashSet::new();
    let mut total = 0usize;
    for (name, rows, cols) in &table {
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
        let m = params.get_mut(name)?;
        if m.shape() != (*rows, *cols) {
            return Err(Error::Shape {
                op: "container tensor",
                left: (*rows, *cols),
                right: m.shape(),
            });
        }
        let mut b = [0u8; 8];
        for v in m.data_mut() {
            r.read_exact(&mut b).map_err(truncated)?;
            *v = f64::from_le_bytes(b);
        }
        total += rows * cols;
    }
    debug_assert_eq!(total, expected);
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(params)
}

pub fn params_to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    write_params(params, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn params_from_bytes(cfg: &ModelConfig, bytes: &[u8]) -> Result<ModelParams> {
    read_params(cfg, bytes)
}
