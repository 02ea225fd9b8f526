//! Checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DSCK" | version u8 | total length u64 | config hash [32] | array count u32
//! per array: name length u32 | name (utf-8) | dtype u8 | rank u32 | dims u64… | raw values
//! text length u32 | config text (utf-8)
//! CRC-32 u32 over every preceding byte
//! ```
//!
//! dtype codes: 1 = f64, 2 = u64, 3 = u8.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSCK";
pub const VERSION: u8 = 1;
const HEADER: usize = 4 + 1 + 8 + 32 + 4;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn code(&self) -> u8 {
        match self {
            ArrayData::F64(_) => 1,
            ArrayData::U64(_) => 2,
            ArrayData::U8(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Serialized run configuration.
    pub config: String,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(config: String) -> Self {
        Checkpoint {
            config,
            arrays: Vec::new(),
        }
    }

    pub fn config_hash(&self) -> [u8; 32] {
        Sha256::digest(self.config.as_bytes()).into()
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: ArrayData::F64(t.data().to_vec()),
        });
    }

    pub fn put_f64(&mut self, name: impl Into<String>, v: Vec<f64>) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: vec![v.len()],
            data: ArrayData::F64(v),
        });
    }

    pub fn put_u64(&mut self, name: impl Into<String>, v: Vec<u64>) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: vec![v.len()],
            data: ArrayData::U64(v),
        });
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no array {name:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::F64(v) => Tensor::new(&a.shape, v.clone()),
            _ => Err(Error::invalid(format!("{name:?} is not a real array"))),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.tensor(name)?.into_data())
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        match &self.get(name)?.data {
            ArrayData::U64(v) => Ok(v.clone()),
            _ => Err(Error::invalid(format!("{name:?} is not an integer array"))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.extend_from_slice(&0u64.to_le_bytes());
        buf.extend_from_slice(&self.config_hash());
        buf.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            buf.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(a.name.as_bytes());
            buf.push(a.data.code());
            buf.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F64(v) => v
                    .iter()
                    .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U64(v) => v
                    .iter()
                    .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U8(v) => buf.extend_from_slice(v),
            }
        }
        buf.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.config.as_bytes());
        let total = (buf.len() + 4) as u64;
        buf[5..13].copy_from_slice(&total.to_le_bytes());
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(FormatError::BadMagic {
                found: bytes.iter().take(4).copied().collect(),
            });
        }
        if bytes.len() < HEADER {
            return Err(FormatError::Truncated {
                needed: HEADER,
                have: bytes.len(),
            });
        }
        if bytes[4] != VERSION {
            return Err(FormatError::Version {
                found: bytes[4],
                expected: VERSION,
            });
        }
        let total = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        if bytes.len() < total {
            return Err(FormatError::Truncated {
                needed: total,
                have: bytes.len(),
            });
        }
        if bytes.len() > total || total < HEADER + 8 {
            return Err(FormatError::Malformed(format!(
                "declared length {total}, file has {}",
                bytes.len()
            )));
        }
        let body = &bytes[..total - 4];
        let stored = u32::from_le_bytes(bytes[total - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(FormatError::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 13 };
        let hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| FormatError::Malformed("array name is not utf-8".into()))?;
            let code = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            let data = match code {
                1 => ArrayData::F64(
                    r.take(8 * count)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => ArrayData::U64(
                    r.take(8 * count)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                3 => ArrayData::U8(r.take(count)?.to_vec()),
                other => return Err(FormatError::Dtype(other)),
            };
            debug_assert_eq!(data.len(), count);
            arrays.push(NamedArray { name, shape, data });
        }
        let len = r.u32()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| FormatError::Malformed("config text is not utf-8".into()))?;
        if r.pos != body.len() {
            return Err(FormatError::Malformed(
                "trailing bytes before checksum".into(),
            ));
        }
        let ck = Checkpoint { config, arrays };
        if ck.config_hash() != hash {
            return Err(FormatError::Malformed(
                "config hash does not match config text".into(),
            ));
        }
        Ok(ck)
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::decode(&bytes).map_err(|kind| Error::Format {
            path: path.to_path_buf(),
            kind,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                FormatError::Malformed(format!("record at byte {} overruns the payload", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("train.seed = 3\n".into());
        c.put_tensor(
            "dec/w",
            &Tensor::new(&[2, 3], vec![1.0, -0.5, 3.25, 1e-300, f64::MAX, -0.0]).unwrap(),
        );
        c.put_u64("state", vec![7, u64::MAX]);
        c.arrays.push(NamedArray {
            name: "bytes".into(),
            shape: vec![3],
            data: ArrayData::U8(vec![1, 2, 3]),
        });
        c
    }

    #[test]
    fn round_trip_bitwise() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(back, c);
        let w = back.tensor("dec/w").unwrap();
        assert_eq!(w.data()[5].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().encode();
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(
            Checkpoint::decode(&v),
            Err(FormatError::Version { found: 9, .. })
        ));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 10]),
            Err(FormatError::Truncated { .. })
        ));
        let mut v = bytes.clone();
        v[60] ^= 1;
        assert!(matches!(
            Checkpoint::decode(&v),
            Err(FormatError::Checksum { .. })
        ));
        assert!(matches!(
            Checkpoint::decode(b"nope"),
            Err(FormatError::BadMagic { .. })
        ));
    }

    #[test]
    fn save_is_atomic_and_load_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        sample().save(&p).unwrap();
        assert!(!p.with_extension("tmp").exists());
        assert_eq!(Checkpoint::load(&p).unwrap(), sample());
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 0xff;
        fs::write(&p, bytes).unwrap();
        let err = Checkpoint::load(&p).unwrap_err();
        assert!(matches!(
            err,
            Error::Format {
                kind: FormatError::Checksum { .. },
                ..
            }
        ));
        assert!(err.to_string().contains("a.ckpt"));
    }

    proptest! {
        #[test]
        fn any_single_bit_flip_is_rejected(pos in 0usize..200, bit in 0u8..8) {
            let bytes = sample().encode();
            let mut v = bytes.clone();
            let i = pos % v.len();
            v[i] ^= 1 << bit;
            prop_assert!(Checkpoint::decode(&v).is_err());
        }
    }
}
