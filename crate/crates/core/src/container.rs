//! Little-endian float32 matrix files used to exchange features and masks
//! with other implementations.
//!
//! Layout: `b"CSMX"`, u32 version, u32 kind, u32 rows, u32 cols, 32-byte
//! SHA-256 of the producing config, then `rows * cols` row-major f32.

use std::path::Path;

use ndarray::Array2;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CSMX";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 4 + 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixKind {
    StackedFeatures = 1,
    LogMel = 2,
    Mask = 3,
}

impl MatrixKind {
    fn from_u32(v: u32) -> Result<Self> {
        match v {
            1 => Ok(MatrixKind::StackedFeatures),
            2 => Ok(MatrixKind::LogMel),
            3 => Ok(MatrixKind::Mask),
            other => Err(Error::ConfigMismatch(format!("unknown matrix kind {other}"))),
        }
    }
}

pub fn config_hash<T: Serialize>(config: &T) -> Result<[u8; 32]> {
    let json = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&json).into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixFile {
    pub kind: MatrixKind,
    pub config_hash: [u8; 32],
    pub values: Array2<f32>,
}

impl MatrixFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let (rows, cols) = self.values.dim();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * rows * cols);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.kind as u32, rows as u32, cols as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.config_hash);
        for v in self.values.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic("matrix file"));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated);
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != VERSION {
            return Err(Error::UnsupportedVersion(word(0)));
        }
        let kind = MatrixKind::from_u32(word(1))?;
        let (rows, cols) = (word(2) as usize, word(3) as usize);
        let config_hash: [u8; 32] = bytes[20..52].try_into().unwrap();
        let body = &bytes[HEADER_LEN..];
        if body.len() != 4 * rows * cols {
            return Err(Error::Truncated);
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(MatrixFile {
            kind,
            config_hash,
            values: Array2::from_shape_vec((rows, cols), data).expect("length checked"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        MatrixFile::from_bytes(&bytes)
    }

    /// Errors unless the file holds `kind` produced under `expected_hash`.
    pub fn expect(self, kind: MatrixKind, expected_hash: &[u8; 32]) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::ConfigMismatch(format!("expected {kind:?}, found {:?}", self.kind)));
        }
        if &self.config_hash != expected_hash {
            return Err(Error::ConfigMismatch("config hash differs".into()));
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_rejections() {
        let file = MatrixFile {
            kind: MatrixKind::Mask,
            config_hash: [7; 32],
            values: Array2::from_shape_fn((3, 5), |(i, j)| i as f32 * 0.5 - j as f32),
        };
        let bytes = file.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN + 60);
        assert_eq!(MatrixFile::from_bytes(&bytes).unwrap(), file);

        assert!(matches!(MatrixFile::from_bytes(b"XXXX"), Err(Error::BadMagic(_))));
        assert!(matches!(MatrixFile::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated)));
        let mut newer = bytes.clone();
        newer[4] = 9;
        assert!(matches!(MatrixFile::from_bytes(&newer), Err(Error::UnsupportedVersion(9))));
        assert!(file.clone().expect(MatrixKind::Mask, &[7; 32]).is_ok());
        assert!(file.clone().expect(MatrixKind::LogMel, &[7; 32]).is_err());
        assert!(file.expect(MatrixKind::Mask, &[0; 32]).is_err());
    }
}
