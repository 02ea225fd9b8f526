//! `FTRM` feature files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "FTRM" | version u8 (=1) | T u32 | F u32 | dtype u8 (1 = f32) | T·F values, row-major | CRC-32 u32
//! ```
//!
//! The CRC covers every byte before it.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FTRM";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
const HEADER: usize = 4 + 1 + 4 + 4 + 1;

pub fn encode(x: &Tensor) -> Result<Vec<u8>> {
    if x.shape().len() != 2 {
        return Err(Error::shape(format!(
            "feature file holds T×F, got {:?}",
            x.shape()
        )));
    }
    let (t, f) = (x.shape()[0], x.shape()[1]);
    let mut buf = Vec::with_capacity(HEADER + 4 * t * f + 4);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(f as u32).to_le_bytes());
    buf.push(DTYPE_F32);
    for &v in x.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, FormatError> {
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
    let t = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    if bytes[13] != DTYPE_F32 {
        return Err(FormatError::Dtype(bytes[13]));
    }
    if t == 0 || f == 0 {
        return Err(FormatError::Malformed(format!("empty matrix {t}×{f}")));
    }
    let needed = HEADER + 4 * t * f + 4;
    if bytes.len() < needed {
        return Err(FormatError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(FormatError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - needed
        )));
    }
    let body = &bytes[..needed - 4];
    let stored = u32::from_le_bytes(bytes[needed - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    let data = body[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::new(&[t, f], data).expect("validated shape"))
}

pub fn write_feature_file(path: &Path, x: &Tensor) -> Result<()> {
    fs::write(path, encode(x)?)?;
    Ok(())
}

pub fn load_feature_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|kind| Error::Format {
        path: path.to_path_buf(),
        kind,
    })
}
