//! `LMSK` binary mask files.
//!
//! Layout (little-endian):
//! - bytes 0..4: magic `LMSK`
//! - byte 4: format version (1)
//! - byte 5: kind (0 = cross, 1 = self)
//! - byte 6: axis convention (0 = first spatial axis is x)
//! - byte 7: reserved, written as 0
//! - bytes 8..12: resolution `p` as u32
//! - bytes 12..16: token count `N` as u32 (0 for self masks)
//! - payload: mask bits in row-major order, least-significant bit first
//!   within each byte, zero-padded to a byte boundary.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{Bits, CrossMask, SelfMask};

pub const MAGIC: &[u8; 4] = b"LMSK";
pub const FORMAT_VERSION: u8 = 1;
pub const AXIS_X_FIRST: u8 = 0;
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("not a mask file (bad magic)")]
    BadMagic,
    #[error("unsupported mask format version {0}")]
    UnsupportedVersion(u8),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("truncated mask file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyMask {
    Cross(CrossMask),
    SelfAttn(SelfMask),
}

impl From<CrossMask> for AnyMask {
    fn from(m: CrossMask) -> Self {
        AnyMask::Cross(m)
    }
}

impl From<SelfMask> for AnyMask {
    fn from(m: SelfMask) -> Self {
        AnyMask::SelfAttn(m)
    }
}

fn payload_bits(kind: u8, p: usize, n: usize) -> usize {
    match kind {
        0 => p * p * n,
        _ => p * p * p * p,
    }
}

pub fn encode_mask(mask: &AnyMask) -> Vec<u8> {
    let (kind, p, n, bits) = match mask {
        AnyMask::Cross(m) => (0u8, m.resolution(), m.token_count(), m.bits()),
        AnyMask::SelfAttn(m) => (1u8, m.resolution(), 0, m.bits()),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + bits.len().div_ceil(8));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[FORMAT_VERSION, kind, AXIS_X_FIRST, 0]);
    out.extend_from_slice(&(p as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    let mut padded = bits.clone();
    padded.resize(bits.len().div_ceil(8) * 8, false);
    out.extend_from_slice(padded.as_raw_slice());
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<AnyMask, CodecError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CodecError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::TruncatedFile {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = bytes[4];
    if version != FORMAT_VERSION {
        return Err(CodecError::UnsupportedVersion(version));
    }
    let kind = bytes[5];
    if kind > 1 {
        return Err(CodecError::ShapeMismatch(format!("unknown mask kind {kind}")));
    }
    if bytes[6] != AXIS_X_FIRST {
        return Err(CodecError::ShapeMismatch(format!(
            "unsupported axis convention {}",
            bytes[6]
        )));
    }
    let p = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if p == 0 {
        return Err(CodecError::ShapeMismatch("resolution is 0".into()));
    }
    match (kind, n) {
        (0, 0) => return Err(CodecError::ShapeMismatch("cross mask with 0 tokens".into())),
        (1, n) if n != 0 => {
            return Err(CodecError::ShapeMismatch(format!("self mask with token count {n}")))
        }
        _ => {}
    }
    let nbits = payload_bits(kind, p, n);
    let expected = HEADER_LEN + nbits.div_ceil(8);
    if bytes.len() < expected {
        return Err(CodecError::TruncatedFile {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(CodecError::ShapeMismatch(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let mut bits = Bits::from_slice(&bytes[HEADER_LEN..]);
    bits.truncate(nbits);
    Ok(match kind {
        0 => AnyMask::Cross(CrossMask::from_bits(p, n, bits)),
        _ => AnyMask::SelfAttn(SelfMask::from_bits(p, bits)),
    })
}

pub fn write_mask(path: impl AsRef<Path>, mask: &AnyMask) -> Result<(), CodecError> {
    fs::write(path, encode_mask(mask))?;
    Ok(())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<AnyMask, CodecError> {
    decode_mask(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bitvec::prelude::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut m = CrossMask::zeros(2, 3);
        m.set(0, 0, 0, true);
        m.set(1, 1, 2, true);
        let bytes = encode_mask(&m.clone().into());
        assert_eq!(&bytes[..8], b"LMSK\x01\x00\x00\x00");
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        // 12 bits: bit 0 and bit 11 set
        assert_eq!(&bytes[16..], &[0b0000_0001, 0b0000_1000]);
        assert_eq!(decode_mask(&bytes).unwrap(), AnyMask::Cross(m));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let bytes = encode_mask(&SelfMask::ones(2).into());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_mask(&wrong), Err(CodecError::BadMagic)));
        assert!(matches!(
            decode_mask(&bytes[..bytes.len() - 1]),
            Err(CodecError::TruncatedFile { .. })
        ));
        assert!(matches!(decode_mask(&bytes[..10]), Err(CodecError::TruncatedFile { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_mask(&extra), Err(CodecError::ShapeMismatch(_))));
        let mut self_with_tokens = bytes;
        self_with_tokens[12] = 5;
        assert!(matches!(decode_mask(&self_with_tokens), Err(CodecError::ShapeMismatch(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lmsk");
        let m: AnyMask = CrossMask::ones(3, 5).into();
        write_mask(&path, &m).unwrap();
        assert_eq!(read_mask(&path).unwrap(), m);
    }

    proptest! {
        #[test]
        fn cross_round_trip(p in 1usize..6, n in 1usize..9, seed in any::<u64>()) {
            let mut bits = bitvec![u8, Lsb0; 0; p * p * n];
            for k in 0..bits.len() {
                bits.set(k, (seed.rotate_left(k as u32 % 64) ^ k as u64) & 1 == 1);
            }
            let m = AnyMask::Cross(CrossMask::from_bits(p, n, bits));
            prop_assert_eq!(decode_mask(&encode_mask(&m)).unwrap(), m);
        }

        #[test]
        fn self_round_trip(p in 1usize..5, seed in any::<u64>()) {
            let mut bits = bitvec![u8, Lsb0; 0; p.pow(4)];
            for k in 0..bits.len() {
                bits.set(k, (seed >> (k % 64)) & 1 == 1);
            }
            let m = AnyMask::SelfAttn(SelfMask::from_bits(p, bits));
            prop_assert_eq!(decode_mask(&encode_mask(&m)).unwrap(), m);
        }
    }
}
