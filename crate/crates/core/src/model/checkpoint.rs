//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "LFCKPT\0\0"
//! version  u32 LE
//! config   u32 LE length + UTF-8 JSON of ModelConfig
//! step     u64 LE   optimizer step count
//! count    u32 LE   number of arrays
//! entries  count × (u32 LE name length, name bytes, u32 LE ndim, ndim × u64 LE dims)
//! data     every array in entry order, little-endian f32, row-major
//! ```
//!
//! Model parameters come first in layout order; optimizer moments follow
//! as `opt.m.<name>` and `opt.v.<name>` when present.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LFCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: ModelState,
    pub step: u64,
    /// Adam first and second moments, in parameter order.
    pub moments: Option<(Vec<Array2<f64>>, Vec<Array2<f64>>)>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let state = &ckpt.state;
    let mut entries: Vec<(String, &Array2<f64>)> = state
        .names()
        .iter()
        .cloned()
        .zip(state.params())
        .collect();
    if let Some((m, v)) = &ckpt.moments {
        for (name, a) in state.names().iter().zip(m) {
            entries.push((format!("opt.m.{name}"), a));
        }
        for (name, a) in state.names().iter().zip(v) {
            entries.push((format!("opt.v.{name}"), a));
        }
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&state.config)?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, a) in &entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(a.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(a.ncols() as u64).to_le_bytes());
    }
    for (_, a) in &entries {
        for &v in a.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    // Write-then-rename so an interrupted save never clobbers the last good file.
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 array name".into()))?;
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let shape = match dims.as_slice() {
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(Error::Checkpoint(format!("{name}: unsupported rank {ndim}"))),
        };
        manifest.push((name, shape));
    }
    let mut arrays = Vec::with_capacity(count);
    for (name, shape) in manifest {
        let raw = r.take(shape.0 * shape.1 * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        let a = Array2::from_shape_vec(shape, data).expect("length matches shape");
        arrays.push((name, a));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }

    let n_params = arrays.iter().filter(|(n, _)| !n.starts_with("opt.")).count();
    let mut rest = arrays.split_off(n_params);
    let state = ModelState::from_parts(config, arrays)?;
    let moments = if rest.is_empty() {
        None
    } else if rest.len() == 2 * n_params {
        let v = rest.split_off(n_params);
        Some((
            rest.into_iter().map(|(_, a)| a).collect(),
            v.into_iter().map(|(_, a)| a).collect(),
        ))
    } else {
        return Err(Error::Checkpoint("incomplete optimizer moments".into()));
    };
    Ok(Checkpoint { state, step, moments })
}
