//! Spatial token indexing: row-major grids, Morton (Z-order) codes and
//! validated permutations.
//!
//! Morton convention: bit `b` of the column `x` lands on bit `2b` of the code
//! and bit `b` of the row `y` on bit `2b + 1`. Four consecutive codes starting
//! at a multiple of four therefore cover one aligned 2×2 block.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest token count a permutation can have and still be stored exactly as
/// `f32` indices.
pub const MAX_SERIALIZED_TOKENS: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::shape(format!("grid {h}x{w} has a zero side")));
        }
        Ok(GridShape { h, w })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    pub fn n(&self) -> usize {
        self.h * self.w
    }

    /// Row-major index of column `x`, row `y`.
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.w + x
    }

    /// `(x, y)` of a row-major index.
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.w, idx / self.w)
    }
}

fn spread_bits(v: u32) -> u64 {
    let mut n = v as u64 & 0x7fff_ffff;
    n = (n | (n << 16)) & 0x0000_ffff_0000_ffff;
    n = (n | (n << 8)) & 0x00ff_00ff_00ff_00ff;
    n = (n | (n << 4)) & 0x0f0f_0f0f_0f0f_0f0f;
    n = (n | (n << 2)) & 0x3333_3333_3333_3333;
    (n | (n << 1)) & 0x5555_5555_5555_5555
}

/// Z-order code of column `x`, row `y`. Both must be below `2^31`.
pub fn morton_encode(x: u32, y: u32) -> u64 {
    debug_assert!(x < 1 << 31 && y < 1 << 31);
    spread_bits(x) | (spread_bits(y) << 1)
}

/// Morton code of a row-major token index.
pub fn morton_code_of(shape: GridShape, idx: usize) -> u64 {
    let (x, y) = shape.coords(idx);
    morton_encode(x as u32, y as u32)
}

/// All row-major token indices sorted by ascending Morton code of their true
/// coordinates. Non-power-of-two grids are not padded.
pub fn morton_order(shape: GridShape) -> Permutation {
    let mut keyed: Vec<(u64, usize)> = (0..shape.n()).map(|i| (morton_code_of(shape, i), i)).collect();
    keyed.sort_unstable();
    Permutation::from_forward_unchecked(keyed.into_iter().map(|(_, i)| i).collect())
}

/// A bijection on `[0, n)`.
///
/// `forward[rank]` is the token index placed at `rank`; `inverse[token]` is
/// the rank of `token`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn new(forward: Vec<usize>) -> Result<Self> {
        let n = forward.len();
        let mut inverse = vec![usize::MAX; n];
        for (rank, &tok) in forward.iter().enumerate() {
            if tok >= n {
                return Err(Error::InvalidPermutation(format!(
                    "index {tok} out of range for length {n}"
                )));
            }
            if inverse[tok] != usize::MAX {
                return Err(Error::InvalidPermutation(format!(
                    "index {tok} appears more than once"
                )));
            }
            inverse[tok] = rank;
        }
        Ok(Permutation { forward, inverse })
    }

    pub(crate) fn from_forward_unchecked(forward: Vec<usize>) -> Self {
        let mut inverse = vec![0; forward.len()];
        for (rank, &tok) in forward.iter().enumerate() {
            inverse[tok] = rank;
        }
        debug_assert!(Permutation::new(forward.clone()).is_ok());
        Permutation { forward, inverse }
    }

    pub fn identity(n: usize) -> Self {
        let forward: Vec<usize> = (0..n).collect();
        Permutation {
            inverse: forward.clone(),
            forward,
        }
    }

    /// Uniformly random permutation.
    pub fn random(n: usize, rng: &mut crate::tensor::Rng) -> Self {
        let mut forward: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut forward);
        Self::from_forward_unchecked(forward)
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &t)| i == t)
    }

    pub fn invert(&self) -> Permutation {
        Permutation {
            forward: self.inverse.clone(),
            inverse: self.forward.clone(),
        }
    }

    /// Gather composition: applying `a.compose(&b)` to a tensor equals
    /// applying `b` and then `a`.
    pub fn compose(&self, other: &Permutation) -> Result<Permutation> {
        if self.len() != other.len() {
            return Err(Error::shape(format!(
                "composing permutations of lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(Self::from_forward_unchecked(
            self.forward.iter().map(|&i| other.forward[i]).collect(),
        ))
    }

    /// Rank-1 tensor of indices stored as exact `f32` integers.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.len() > MAX_SERIALIZED_TOKENS {
            return Err(Error::shape(format!(
                "permutation of length {} exceeds the 2^24 serialization limit",
                self.len()
            )));
        }
        Tensor::from_vec(self.forward.iter().map(|&i| i as f32).collect())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Permutation> {
        if t.rank() != 1 {
            return Err(Error::shape(format!(
                "permutation tensor must be rank 1, got {:?}",
                t.shape()
            )));
        }
        let forward = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && (v as usize) < MAX_SERIALIZED_TOKENS {
                    Ok(v as usize)
                } else {
                    Err(Error::InvalidPermutation(format!(
                        "{v} is not an exact token index"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Permutation::new(forward)
    }
}

/// Gathers rows: `out[i, ..] = t[p.forward[i], ..]`.
pub fn apply_permutation(p: &Permutation, t: &Tensor) -> Result<Tensor> {
    if t.rows() != p.len() {
        return Err(Error::shape(format!(
            "permutation of length {} applied to {} rows",
            p.len(),
            t.rows()
        )));
    }
    t.gather_rows(p.forward())
}

pub fn invert(p: &Permutation) -> Permutation {
    p.invert()
}
