//! Binary snippet-feature files.
//!
//! Layout (little-endian):
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 4    | magic `AVVP`                       |
//! | 4      | 2    | format version (1)                 |
//! | 6      | 2    | reserved, 0                        |
//! | 8      | 4    | snippet count `T`                  |
//! | 12     | 4    | feature width `d`                  |
//! | 16     | 1    | modality tag (0 audio, 1 visual)   |
//! | 17     | 15   | zero padding                       |
//! | 32     | 4·T·d| `f32` values, row-major            |

use std::path::Path;

use super::{write_atomic, Modality};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const FEATURE_MAGIC: [u8; 4] = *b"AVVP";
pub const FEATURE_VERSION: u16 = 1;
pub const FEATURE_HEADER_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub modality: Modality,
    pub features: Matrix,
}

fn modality_tag(m: Modality) -> Result<u8> {
    match m {
        Modality::Audio => Ok(0),
        Modality::Visual => Ok(1),
        Modality::AudioVisual => Err(Error::InvalidArgument(
            "feature files hold a single modality".into(),
        )),
    }
}

/// Serializes a feature matrix. Values are stored as `f32`.
pub fn encode_features(features: &Matrix, modality: Modality) -> Result<Vec<u8>> {
    let tag = modality_tag(modality)?;
    let (t, d) = features.shape();
    let t32 = u32::try_from(t).map_err(|_| Error::InvalidArgument(format!("T = {t} too large")))?;
    let d32 = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("d = {d} too large")))?;
    if t == 0 || d == 0 {
        return Err(Error::InvalidArgument(
            "feature matrix must be non-empty".into(),
        ));
    }
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * t * d);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&t32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    out.push(tag);
    out.extend_from_slice(&[0u8; 15]);
    debug_assert_eq!(out.len(), FEATURE_HEADER_LEN);
    for &v in features.data() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite feature value {v}"
            )));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

/// Parses a feature file image; `path` is used only for error messages.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureFile> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            expected: FEATURE_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let bad = |offset: usize, reason: &str| Error::BadHeader {
        path: path.into(),
        offset,
        reason: reason.into(),
    };

    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            offset: 0,
            found: magic,
        });
    }
    let version = u16_at(4);
    if version != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            found: version.into(),
            supported: FEATURE_VERSION.into(),
        });
    }
    if u16_at(6) != 0 {
        return Err(bad(6, "reserved field must be zero"));
    }
    let t = u32_at(8) as usize;
    let d = u32_at(12) as usize;
    if t == 0 {
        return Err(bad(8, "snippet count must be positive"));
    }
    if d == 0 {
        return Err(bad(12, "feature width must be positive"));
    }
    let modality = match bytes[16] {
        0 => Modality::Audio,
        1 => Modality::Visual,
        other => return Err(bad(16, &format!("unknown modality tag {other}"))),
    };
    if let Some(i) = bytes[17..FEATURE_HEADER_LEN].iter().position(|&b| b != 0) {
        return Err(bad(17 + i, "header padding must be zero"));
    }

    let expected = FEATURE_HEADER_LEN as u64 + 4 * t as u64 * d as u64;
    let found = bytes.len() as u64;
    if found < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(Error::PayloadMismatch {
            path: path.into(),
            expected,
            found,
        });
    }
    let mut data = Vec::with_capacity(t * d);
    for (i, chunk) in bytes[FEATURE_HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite {
                path: path.into(),
                offset: FEATURE_HEADER_LEN + 4 * i,
            });
        }
        data.push(f64::from(v));
    }
    Ok(FeatureFile {
        modality,
        features: Matrix::from_vec(t, d, data)?,
    })
}

pub fn load_features(path: &Path) -> Result<FeatureFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

pub fn save_features(path: &Path, features: &Matrix, modality: Modality) -> Result<()> {
    write_atomic(path, &encode_features(features, modality)?)
}
