//! Parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DSR1"  u32 version  [u8; 32] architecture digest  u32 record count
//! per record: u32 name length, name bytes (UTF-8), u8 dtype (0 = f64),
//!             u32 rank, u32 extents, raw values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{bail, DsrError, Result};
use crate::network::Network;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSR1";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn encode(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&net.digest());
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(net))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len().saturating_sub(self.pos) < n {
            bail!(Format, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Overwrites the parameters of `net` from an encoded checkpoint. The
/// architecture digest and every record name and shape must match.
pub fn decode_into(net: &mut Network, bytes: &[u8]) -> Result<()> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        bail!(Format, "not a checkpoint (bad magic)");
    }
    let version = c.u32()?;
    if version != VERSION {
        bail!(Format, "unsupported checkpoint version {version}");
    }
    if c.take(32)? != net.digest() {
        bail!(Spec, "checkpoint was written for a different architecture");
    }
    let count = c.u32()? as usize;
    if count != net.params().len() {
        bail!(
            Format,
            "checkpoint holds {count} records, network has {}",
            net.params().len()
        );
    }
    let mut values = Vec::with_capacity(count);
    for p in net.params() {
        let len = c.u32()? as usize;
        let name =
            std::str::from_utf8(c.take(len)?).map_err(|_| DsrError::Format("record name is not UTF-8".into()))?;
        if name != p.name {
            bail!(Format, "expected record {:?}, found {name:?}", p.name);
        }
        let dtype = c.take(1)?[0];
        if dtype != DTYPE_F64 {
            bail!(Format, "record {name}: unknown dtype tag {dtype}");
        }
        let rank = c.u32()? as usize;
        if rank > 8 {
            bail!(Format, "record {name}: implausible rank {rank}");
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        if shape != p.value.shape() {
            bail!(
                Format,
                "record {name}: shape {shape:?} differs from {:?}",
                p.value.shape()
            );
        }
        let data: Vec<f64> = c
            .take(p.value.numel() * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            bail!(Format, "record {name}: non-finite values");
        }
        values.push(Tensor::new(shape, data)?);
    }
    if c.pos != bytes.len() {
        bail!(Format, "{} trailing bytes after the last record", bytes.len() - c.pos);
    }
    for (p, v) in net.params_mut().iter_mut().zip(values) {
        p.value = v;
    }
    Ok(())
}

pub fn load_into(net: &mut Network, path: impl AsRef<Path>) -> Result<()> {
    let bytes = fs::read(path)?;
    decode_into(net, &bytes)
}
