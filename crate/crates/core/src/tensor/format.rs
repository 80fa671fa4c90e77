//! The `SPTN` binary tensor format.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "SPTN"
//! 4       1         version (1)
//! 5       1         dtype (0 = f32 little-endian)
//! 6       1         rank
//! 7       3         reserved, zero
//! 10      8 * rank  extents, u64 little-endian
//! ...     4 * n     payload, row-major
//! ```

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SPTN";
pub const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

/// Bytes before the extents: magic, version, dtype, rank, reserved.
pub const HEADER_FIXED_LEN: usize = 10;

impl Tensor {
    pub fn to_sptn_bytes(&self) -> Vec<u8> {
        let rank = u8::try_from(self.rank()).expect("SPTN supports rank <= 255");
        let mut out = Vec::with_capacity(HEADER_FIXED_LEN + 8 * self.rank() + 4 * self.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&[VERSION, DTYPE_F32, rank, 0, 0, 0]);
        for &e in self.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in self.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_sptn_bytes(bytes: &[u8]) -> Result<Tensor> {
        let truncated = |expected: usize| Error::Truncated {
            expected,
            found: bytes.len(),
        };
        if bytes.len() < 4 {
            return Err(truncated(HEADER_FIXED_LEN));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        if bytes.len() < HEADER_FIXED_LEN {
            return Err(truncated(HEADER_FIXED_LEN));
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        if bytes[5] != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(bytes[5]));
        }
        let rank = bytes[6] as usize;
        let dims_end = HEADER_FIXED_LEN + 8 * rank;
        if bytes.len() < dims_end {
            return Err(truncated(dims_end));
        }
        let mut shape = Vec::with_capacity(rank);
        for chunk in bytes[HEADER_FIXED_LEN..dims_end].chunks_exact(8) {
            let e = u64::from_le_bytes(chunk.try_into().unwrap());
            shape.push(usize::try_from(e).map_err(|_| Error::shape(format!("extent {e} too large")))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows")))?;
        let expected = dims_end + 4 * n;
        if bytes.len() < expected {
            return Err(truncated(expected));
        }
        if bytes.len() > expected {
            return Err(Error::shape(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected
            )));
        }
        let data = bytes[dims_end..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn tensor_write(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_sptn_bytes()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn tensor_read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Tensor::from_sptn_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn single_element_layout() {
        let t = Tensor::from_vec(vec![3.0]).unwrap();
        let b = t.to_sptn_bytes();
        // 10 fixed header bytes + one u64 extent, then a single f32.
        assert_eq!(b.len(), 18 + 4);
        assert_eq!(&b[..4], b"SPTN");
        assert_eq!(&b[4..10], &[1, 0, 1, 0, 0, 0]);
        assert_eq!(&b[10..18], &1u64.to_le_bytes());
        assert_eq!(&b[18..], &3.0f32.to_le_bytes());
        assert_eq!(Tensor::from_sptn_bytes(&b).unwrap(), t);
    }

    #[test]
    fn zeros_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.sptn");
        let t = Tensor::zeros(&[2, 3]);
        tensor_write(&t, &path).unwrap();
        assert_eq!(tensor_read(&path).unwrap(), t);
    }

    #[test]
    fn random_tensors_round_trip_bit_exact() {
        let mut rng = Rng::new(0);
        for _ in 0..1000 {
            let rank = rng.range_inclusive(1, 4);
            let shape: Vec<usize> = (0..rank).map(|_| rng.range_inclusive(1, 5)).collect();
            let t = Tensor::randn(&shape, 10.0, &mut rng);
            let back = Tensor::from_sptn_bytes(&t.to_sptn_bytes()).unwrap();
            assert_eq!(back.shape(), t.shape());
            let same_bits = back
                .data()
                .iter()
                .zip(t.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same_bits);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let mut b = Tensor::zeros(&[2]).to_sptn_bytes();
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            Tensor::from_sptn_bytes(&b),
            Err(Error::BadMagic { found }) if &found == b"XXXX"
        ));
    }

    #[test]
    fn rejects_short_payload() {
        let b = Tensor::zeros(&[2, 2]).to_sptn_bytes();
        let short = &b[..b.len() - 4];
        assert!(matches!(
            Tensor::from_sptn_bytes(short),
            Err(Error::Truncated { expected, found }) if expected == b.len() && found == b.len() - 4
        ));
    }

    #[test]
    fn rejects_version_and_dtype() {
        let mut b = Tensor::zeros(&[1]).to_sptn_bytes();
        b[4] = 2;
        assert!(matches!(
            Tensor::from_sptn_bytes(&b),
            Err(Error::UnsupportedVersion(2))
        ));
        b[4] = 1;
        b[5] = 1;
        assert!(matches!(
            Tensor::from_sptn_bytes(&b),
            Err(Error::UnsupportedDtype(1))
        ));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = tensor_read("/nonexistent/dir/t.sptn").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/t.sptn"));
    }
}
