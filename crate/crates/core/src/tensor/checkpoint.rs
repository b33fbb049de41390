//! Binary parameter files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ZRKGC1"                   6 bytes
//! precision                  u8   (4 = f32, 8 = f64)
//! repeated until EOF:
//!   name_len                 u32
//!   name                     name_len bytes, UTF-8
//!   rank                     u32
//!   dims                     rank x u64
//!   values                   product(dims) x f32|f64
//! ```

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"ZRKGC1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn flag(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

pub type Record = (String, Tensor);

pub fn encode_records(records: &[Record], precision: Precision) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(precision.flag());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            match precision {
                Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_records(buf: &[u8], path: &Path) -> Result<(Precision, Vec<Record>)> {
    let bad = |m: &str| Error::format(path, m);
    if buf.len() < 7 || &buf[..6] != MAGIC {
        return Err(bad("missing ZRKGC1 header"));
    }
    let precision = match buf[6] {
        4 => Precision::F32,
        8 => Precision::F64,
        other => return Err(bad(&format!("unknown precision flag {other}"))),
    };
    let mut cur = Cursor { buf, pos: 7 };
    let mut records = Vec::new();
    while cur.pos < buf.len() {
        let truncated = || bad("truncated record");
        let name_len = cur.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(cur.take(name_len).ok_or_else(truncated)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        let rank = cur.u32().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64().ok_or_else(truncated)? as usize);
        }
        let n: usize = shape.iter().product();
        let width = precision.flag() as usize;
        let raw = cur.take(n * width).ok_or_else(truncated)?;
        let data = match precision {
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok((precision, records))
}

/// Writes atomically (temp file + rename).
pub fn write_records(path: &Path, records: &[Record], precision: Precision) -> Result<()> {
    let bytes = encode_records(records, precision);
    crate::io::write_atomic(path, &bytes)
}

pub fn read_records(path: &Path) -> Result<(Precision, Vec<Record>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&buf, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f64_records_roundtrip(
            vals in proptest::collection::vec(-1e6f64..1e6, 1..40),
            name in "[a-z.]{1,12}",
        ) {
            let t = Tensor::new(vec![vals.len()], vals).unwrap();
            let recs = vec![(name, t)];
            let bytes = encode_records(&recs, Precision::F64);
            let (p, back) = decode_records(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(p, Precision::F64);
            prop_assert_eq!(back, recs);
        }
    }

    #[test]
    fn header_layout() {
        let recs = vec![(
            "ab".to_string(),
            Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(),
        )];
        let bytes = encode_records(&recs, Precision::F32);
        assert_eq!(&bytes[..6], b"ZRKGC1");
        assert_eq!(bytes[6], 4);
        assert_eq!(&bytes[7..11], &2u32.to_le_bytes());
        assert_eq!(&bytes[11..13], b"ab");
        assert_eq!(&bytes[13..17], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 7 + 4 + 2 + 4 + 16 + 8);
        let (_, back) = decode_records(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back[0].1.data(), &[1.0, 2.0]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode_records(b"NOPE123", Path::new("x")).is_err());
        let recs = vec![("w".to_string(), Tensor::row(vec![1.0, 2.0, 3.0]))];
        let bytes = encode_records(&recs, Precision::F64);
        assert!(decode_records(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
    }
}
