//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic           8 bytes   "CFCKPT\0\0"
//! format_version  u32       1
//! config_digest   32 bytes  SHA-256 of the model config JSON
//! entry_count     u32
//! entry*:
//!   name_len      u32
//!   name          name_len bytes, UTF-8
//!   dtype         u8        1 = f64
//!   ndim          u8
//!   dims          u64 * ndim
//!   data          f64 * prod(dims), raw IEEE-754 bits
//! ```
//!
//! Only parameter values are stored; optimizer moments are not.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{Array, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CFCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

pub type ConfigDigest = [u8; 32];

pub fn config_digest<T: Serialize>(config: &T) -> ConfigDigest {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json).into()
}

pub fn encode(store: &ParamStore, digest: &ConfigDigest) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(digest);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F64);
        buf.push(2);
        for d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ConfigDigest, ParamStore)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version as u64,
            expected: FORMAT_VERSION as u64,
        });
    }
    let digest: ConfigDigest = r.take(32)?.try_into().unwrap();
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("entry name: {e}")))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("{name}: unsupported dtype {dtype}")));
        }
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(Error::Checkpoint(format!("{name}: {ndim}-d arrays unsupported"))),
        };
        let data = (0..rows * cols)
            .map(|_| r.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
            .collect::<Result<Vec<_>>>()?;
        store.register(name, Array::new(rows, cols, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((digest, store))
}

pub fn save(path: &Path, store: &ParamStore, digest: &ConfigDigest) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(store, digest)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ConfigDigest, ParamStore)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.register("a.w", Array::randn(3, 5, 1.0, &mut rng)).unwrap();
        store.register("a.b", Array::row(&[f64::MIN_POSITIVE, -0.0, 1e300])).unwrap();
        let digest = config_digest(&("cfg", 1));
        let bytes = encode(&store, &digest);
        let (d2, back) = decode(&bytes).unwrap();
        assert_eq!(d2, digest);
        assert_eq!(encode(&back, &d2), bytes);
        for (name, p) in store.iter() {
            let q = back.get(name).unwrap();
            let a: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = q.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let store = ParamStore::new();
        let mut bytes = encode(&store, &[0; 32]);
        assert!(decode(&bytes[..10]).is_err());
        bytes[8] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Version { found: 9, .. })));
    }
}
