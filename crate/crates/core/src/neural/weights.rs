//! Binary weight files.
//!
//! Layout: the 6-byte magic `PXSBW1`, then one record per tensor until end
//! of file. A record is the name length (u64), the UTF-8 name, the rank
//! (u64), each dimension (u64), and the values as f64. All integers and
//! floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{Tensor, ToyNet};
use crate::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 6] = b"PXSBW1";

const MAX_RANK: u64 = 8;

pub fn encode(net: &ToyNet) -> Vec<u8> {
    let mut out = WEIGHTS_MAGIC.to_vec();
    for (name, t) in net.named_params() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Weights(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<ToyNet> {
    if !bytes.starts_with(WEIGHTS_MAGIC) {
        return Err(Error::Weights("missing PXSBW1 header".into()));
    }
    let mut r = Reader { bytes, pos: WEIGHTS_MAGIC.len() };
    let mut records = Vec::new();
    while !r.done() {
        let name_len = r.u64()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Weights("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u64()?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Weights(format!("{name}: unsupported rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let count = match count {
            Some(c) if c.saturating_mul(8) <= bytes.len() => c,
            _ => return Err(Error::Weights(format!("{name}: implausible shape {dims:?}"))),
        };
        let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        records.push((name, Tensor::from_vec(&dims, data)?));
    }
    ToyNet::from_named(records)
}

pub fn write_weights(net: &ToyNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(net)).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<ToyNet> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
