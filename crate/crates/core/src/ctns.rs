//! `CTNS` tensor files and parameter archives.
//!
//! Tensor record layout (all little-endian):
//!
//! ```text
//! b"CTNS" | u32 version = 1 | u32 rank | rank × u64 extents | f64 payload (row-major)
//! ```
//!
//! A parameter archive wraps several records:
//!
//! ```text
//! b"CTNA" | u32 version = 1 | u64 manifest length | manifest (JSON) | records
//! ```
//!
//! The manifest lists `{name, dims, offset, length}` per record, where `offset`
//! counts bytes from the first record.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"CTNS";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"CTNA";
pub const VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 8 * t.rank() + 8 * t.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format_err("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes one record from the front of `bytes`; returns it with the number
/// of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != TENSOR_MAGIC {
        return Err(format_err("bad magic, expected CTNS"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported CTNS version {version}")));
    }
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(format_err(format!("unsupported rank {rank}")));
    }
    let dims = (0..rank)
        .map(|_| r.u64().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err("extent product overflows"))?;
    let payload = r.take(n.checked_mul(8).ok_or_else(|| format_err("payload too large"))?)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::new(dims, data)?, r.pos))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (t, used) = decode_tensor(&bytes)?;
    if used != bytes.len() {
        return Err(format_err("trailing bytes after CTNS record"));
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

pub fn encode_archive(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut records = Vec::new();
    let mut manifest = Vec::with_capacity(entries.len());
    for (name, t) in entries {
        let rec = encode_tensor(t);
        manifest.push(ManifestEntry {
            name: name.clone(),
            dims: t.dims().to_vec(),
            offset: records.len() as u64,
            length: rec.len() as u64,
        });
        records.extend_from_slice(&rec);
    }
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut buf = Vec::with_capacity(16 + json.len() + records.len());
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&records);
    buf
}

pub fn decode_archive(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != ARCHIVE_MAGIC {
        return Err(format_err("bad magic, expected CTNA"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported archive version {version}")));
    }
    let len = r.u64()? as usize;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(r.take(len)?)
        .map_err(|e| format_err(format!("bad manifest: {e}")))?;
    let records = &bytes[r.pos..];
    manifest
        .into_iter()
        .map(|e| {
            let start = e.offset as usize;
            let end = start
                .checked_add(e.length as usize)
                .filter(|&end| end <= records.len())
                .ok_or_else(|| format_err(format!("record '{}' out of range", e.name)))?;
            let (t, used) = decode_tensor(&records[start..end])?;
            if used != e.length as usize || t.dims() != e.dims {
                return Err(format_err(format!("record '{}' disagrees with manifest", e.name)));
            }
            Ok((e.name, t))
        })
        .collect()
}

pub fn write_archive(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode_archive(entries))?;
    Ok(())
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    decode_archive(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![1, 1, 2], vec![1.0, -2.5]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"CTNS");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &3u32.to_le_bytes());
        assert_eq!(&b[12..20], &1u64.to_le_bytes());
        assert_eq!(&b[28..36], &2u64.to_le_bytes());
        assert_eq!(&b[36..44], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 12 + 3 * 8 + 2 * 8);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let b = encode_tensor(&Tensor::full(&[2, 2], 3.0));
        assert!(matches!(decode_tensor(&b[..b.len() - 1]), Err(Error::Format(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn archive_round_trip(
            shapes in proptest::collection::vec(proptest::collection::vec(1usize..4, 1..5), 0..5),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::rng::Rng::new(seed);
            let entries: Vec<(String, Tensor)> = shapes
                .into_iter()
                .enumerate()
                .map(|(i, dims)| {
                    let n = dims.iter().product();
                    (format!("t{i}"), Tensor::new(dims, rng.normal(n, 1.0)).unwrap())
                })
                .collect();
            let back = decode_archive(&encode_archive(&entries)).unwrap();
            prop_assert_eq!(back, entries);
        }
    }
}
