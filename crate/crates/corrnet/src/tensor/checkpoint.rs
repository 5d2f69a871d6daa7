//! Binary checkpoint container.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! magic   4 bytes  b"CNK1"
//! version u32      currently 1
//! dtype   u8       0 = f32, 1 = f64
//! then per parameter, in registration order:
//!   name_len u32
//!   name     name_len bytes of UTF-8
//!   rank     u32
//!   extents  rank x u64
//!   values   product(extents) raw little-endian scalars
//! ```
//!
//! Round-trips are bit exact: loading a file written from the same parameter
//! registration reproduces every value byte for byte.

use std::fs;
use std::path::Path;

use super::params::Parameters;
use super::{Dtype, Scalar, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CNK1";
const VERSION: u32 = 1;

pub fn save<S: Scalar>(path: &Path, params: &Parameters<S>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(S::DTYPE.code());
    for (_, p) in params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Load a checkpoint into an already registered parameter store. The file
/// must carry exactly the registered parameter set with matching shapes and
/// dtype; any mismatch is reported by parameter name.
pub fn load<S: Scalar>(path: &Path, params: &mut Parameters<S>) -> Result<()> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let dtype = Dtype::from_code(r.take(1)?[0])?;
    if dtype != S::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype {dtype:?} does not match run dtype {:?}",
            S::DTYPE
        )));
    }

    let mut seen = vec![false; params.len()];
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * S::BYTES)?;
        let id = params.find(&name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint parameter {name:?} is not part of this model"))
        })?;
        if params.value(id).shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?}: checkpoint shape {:?} does not match model shape {:?}",
                shape,
                params.value(id).shape()
            )));
        }
        let data: Vec<S> = raw
            .chunks_exact(S::BYTES)
            .map(|c| S::read_le(c))
            .collect();
        *params.value_mut(id) = Tensor::new(shape, data)?;
        seen[id.0] = true;
    }
    if let Some((_, missing)) = params.iter().find(|(id, _)| !seen[id.0]) {
        return Err(Error::Checkpoint(format!(
            "checkpoint is missing parameter {:?}",
            missing.name
        )));
    }
    Ok(())
}
