//! Binary (P5) PGM output for 2D maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Encodes `values` (row-major, `h × w`) as an 8-bit P5 PGM after min-max
/// normalization to `0..=255`. A constant map encodes as all zeros.
pub fn encode_pgm(values: &[f32], h: usize, w: usize) -> Result<Vec<u8>> {
    if values.len() != h * w {
        return Err(Error::shape(format!(
            "pgm: {} values for a {h}x{w} image",
            values.len()
        )));
    }
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            (((v - lo) / span) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, values: &[f32], h: usize, w: usize) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(values, h, w)?).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
