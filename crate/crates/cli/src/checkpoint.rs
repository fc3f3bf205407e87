//! Flat weight checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! | field          | type            |
//! |----------------|-----------------|
//! | magic          | `b"CDPW"`       |
//! | version        | `u32` (= 1)     |
//! | activation     | `u8` (0 relu, 1 tanh) |
//! | layer count    | `u32`           |
//! | layer sizes    | `u64` × count   |
//! | param count    | `u64`           |
//! | parameters     | `f64` × params, in flatten order |

use std::path::Path;

use cyclic_dp_core::{Activation, ArchitectureSpec, ModelParams};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"CDPW";
pub const VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let arch = params.arch();
    let flat = params.flatten();
    let sizes = arch.layer_sizes();
    let mut out = Vec::with_capacity(4 + 4 + 1 + 4 + 8 * sizes.len() + 8 + 8 * flat.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match arch.hidden_activation() {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    });
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for &s in sizes {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ModelParams, String> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let act = match c.take(1)?[0] {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        other => return Err(format!("unknown activation tag {other}")),
    };
    let n_layers = c.u32()? as usize;
    let sizes = (0..n_layers)
        .map(|_| c.u64().map(|v| v as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let arch = ArchitectureSpec::new(sizes, act).map_err(|e| e.to_string())?;
    let count = c.u64()? as usize;
    if count != arch.param_count() {
        return Err(format!(
            "header says {count} parameters, architecture has {}",
            arch.param_count()
        ));
    }
    let flat = (0..count)
        .map(|_| c.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    ModelParams::unflatten(&arch, &flat).map_err(|e| e.to_string())
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    crate::fsutil::write_atomic(path, &encode(params))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|message| CliError::Data {
        path: path.to_path_buf(),
        message,
    })
}
