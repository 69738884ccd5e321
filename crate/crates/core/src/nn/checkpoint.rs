//! Flat binary parameter serialization.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "VXPK"            4 bytes
//! version u32              currently 1
//! count   u32              number of parameters
//! per parameter, in registration order:
//!   name_len u32, name bytes (UTF-8)
//!   shape    4 x u32       NCHW
//!   data     product(shape) x f64, little-endian bit patterns
//! ```
//!
//! The companion crate writes these bytes to disk next to a JSON manifest;
//! this module only deals in buffers so it stays `no_std`.

use super::{NnError, ParamStore, Tensor4};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

const MAGIC: &[u8; 4] = b"VXPK";
const VERSION: u32 = 1;

pub fn encode_params(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more of {})",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamStore, NnError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| NnError::Checkpoint("parameter name is not UTF-8".into()))?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        params.add(&name, Tensor4::from_vec(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(NnError::Checkpoint(format!(
            "{} trailing bytes after {count} parameters",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}
