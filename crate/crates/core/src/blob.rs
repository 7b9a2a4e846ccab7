//! Tensor blob files: the 8-byte magic `NXGPTBLB`, a little-endian `u32`
//! rank, `rank` little-endian `u32` dims, then the raw little-endian `f32`
//! payload. Used for checkpoint tensors and dataset payloads alike.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NXGPTBLB";

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Blob {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidInput(format!(
                "blob shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parse a blob, rejecting bad magic and any payload whose byte length
    /// is not exactly `4 * product(shape)`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: String| Error::CorruptCheckpoint(msg);
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing NXGPTBLB magic".into()));
        }
        let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = 12 + 4 * rank;
        if bytes.len() < header {
            return Err(corrupt(format!("header truncated (rank {rank})")));
        }
        let shape: Vec<usize> = bytes[12..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let numel: usize = shape.iter().product();
        let payload = &bytes[header..];
        if payload.len() != 4 * numel {
            return Err(corrupt(format!(
                "payload is {} bytes, shape {shape:?} needs {}",
                payload.len(),
                4 * numel
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::CorruptCheckpoint(msg) => {
                Error::CorruptCheckpoint(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let blob = Blob::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = blob.to_bytes();
        assert_eq!(&bytes[..8], b"NXGPTBLB");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let blob = Blob::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = blob.to_bytes();
        let err = Blob::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint(_)));
    }

    #[test]
    fn bad_magic_is_corrupt() {
        let mut bytes = Blob::new(vec![1], vec![0.0]).unwrap().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Blob::from_bytes(&bytes),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let numel: usize = dims.iter().product();
            let data: Vec<f32> = (0..numel)
                .map(|i| f32::from_bits(seed.wrapping_mul(2_654_435_761).wrapping_add(i as u32 * 97) & 0x7f7f_ffff))
                .collect();
            let blob = Blob::new(dims, data).unwrap();
            let back = Blob::from_bytes(&blob.to_bytes()).unwrap();
            prop_assert_eq!(back.shape, blob.shape);
            let same = back.data.iter().zip(&blob.data).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
