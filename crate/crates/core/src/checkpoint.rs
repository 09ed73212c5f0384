//! Named-tensor record format shared by checkpoints and wire payloads.
//!
//! ```text
//! SPLITFED-CKPT v1\n                       (checkpoint files only)
//! repeated:
//!   name length   u32 big-endian
//!   name          UTF-8 bytes
//!   rank          u32 big-endian
//!   dims          rank x u32 big-endian
//!   values        product(dims) x f64 little-endian
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Tensor};

pub const CHECKPOINT_HEADER: &[u8] = b"SPLITFED-CKPT v1\n";

/// Encoded size of one record.
pub fn record_len(name: &str, tensor: &Tensor) -> usize {
    4 + name.len() + 4 + 4 * tensor.rank() + 8 * tensor.len()
}

pub fn write_record(out: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_be_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(tensor.rank() as u32).to_be_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a sequence of records filling `buf` exactly.
pub fn read_records(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { buf, pos: 0 };
    let mut out = Vec::new();
    while cur.pos < buf.len() {
        let len = cur.u32("name length")?;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::Protocol("record name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32("rank")?;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(cur.u32("dimension")?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| Error::Truncated(format!("record {name}: element count overflows")))?;
        let raw = cur.take(count * 8, "values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

pub fn encode_checkpoint(params: &ParameterSet) -> Vec<u8> {
    let size: usize = params.entries().iter().map(|(n, t)| record_len(n, t)).sum();
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER.len() + size);
    out.extend_from_slice(CHECKPOINT_HEADER);
    for (name, t) in params.entries() {
        write_record(&mut out, name, t);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterSet> {
    let body = bytes
        .strip_prefix(CHECKPOINT_HEADER)
        .ok_or_else(|| Error::Protocol("missing SPLITFED-CKPT v1 header".into()))?;
    ParameterSet::new(read_records(body)?)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParameterSet) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterSet> {
    decode_checkpoint(&fs::read(path)?)
}
