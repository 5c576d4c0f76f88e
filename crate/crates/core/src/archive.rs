//! Versioned parameter archives.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes   ("SEMG" generator, "SEMP" prompt bank)
//! version      u32
//! manifest_len u32
//! manifest     manifest_len bytes of UTF-8 JSON
//! count        u64
//! params       count x f64
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::hex_digest;
use crate::error::{bail, Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub fn encode<M: Serialize>(magic: &[u8; 4], manifest: &M, params: &[f64]) -> Vec<u8> {
    let manifest = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + manifest.len() + 8 * params.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode<M: DeserializeOwned>(magic: &[u8; 4], bytes: &[u8]) -> Result<(M, Vec<f64>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != magic {
        bail!(Data, "bad magic; expected {:?}", String::from_utf8_lossy(magic));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        bail!(Data, "unsupported archive version {version} (this build reads {FORMAT_VERSION})");
    }
    let len = cur.u32()? as usize;
    let manifest: M = serde_json::from_slice(cur.take(len)?)
        .map_err(|e| Error::Data(format!("archive manifest: {e}")))?;
    let count = cur.u64()? as usize;
    let raw = cur.take(count.checked_mul(8).ok_or_else(|| Error::Data("archive too large".into()))?)?;
    if cur.pos != bytes.len() {
        bail!(Data, "trailing bytes after archive payload");
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((manifest, params))
}

pub fn write<M: Serialize>(path: &Path, magic: &[u8; 4], manifest: &M, params: &[f64]) -> Result<()> {
    fs::write(path, encode(magic, manifest, params)).map_err(|e| Error::io(path, e))
}

pub fn read<M: DeserializeOwned>(path: &Path, magic: &[u8; 4]) -> Result<(M, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn digest_bytes(bytes: &[u8]) -> String {
    hex_digest(&Sha256::digest(bytes))
}

/// Hex SHA-256 of a parameter vector's little-endian bytes.
pub fn digest(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex_digest(&h.finalize())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            bail!(Data, "archive truncated");
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(params in proptest::collection::vec(any::<f64>(), 0..64)) {
            let bytes = encode(b"TEST", &"manifest", &params);
            let (m, back): (String, Vec<f64>) = decode(b"TEST", &bytes).unwrap();
            prop_assert_eq!(m, "manifest");
            prop_assert_eq!(params.len(), back.len());
            for (a, b) in params.iter().zip(&back) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(b"TEST", &1u32, &[1.0, 2.0]);
        assert!(decode::<u32>(b"NOPE", &bytes).is_err());
        assert!(decode::<u32>(b"TEST", &bytes[..bytes.len() - 1]).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(decode::<u32>(b"TEST", &v2).is_err());
    }
}
