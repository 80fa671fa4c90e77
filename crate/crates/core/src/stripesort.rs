//! G-way stripe interleaving of an importance order.
//!
//! Viewing `π` as an `(N/G) × G` matrix `T[t, g] = π[t·G + g]`, the scan
//! order is `σ = flatten(Tᵀ)`: `σ[g·(N/G) + t] = π[t·G + g]`. Block `g` of
//! `σ` (ranks `g·N/G .. (g+1)·N/G`) then holds every `G`-th entry of `π`
//! starting at offset `g`, so each block samples the whole image.

use crate::error::{check_divisible, Error, Result};
use crate::grid::{morton_order, Permutation};
use crate::saliency::{importance_order, OrderingConfig, SaliencyMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StripeVariant {
    /// Rank by saliency, then interleave.
    #[default]
    Full,
    /// Saliency ranking without the interleave.
    NoInterleave,
    /// Interleave applied to the plain Morton order.
    NoSort,
}

impl std::str::FromStr for StripeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(StripeVariant::Full),
            "no_interleave" => Ok(StripeVariant::NoInterleave),
            "no_sort" => Ok(StripeVariant::NoSort),
            other => Err(Error::config(format!(
                "unknown stripe variant {other:?} (expected full|no_interleave|no_sort)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StripeConfig {
    pub g: usize,
    pub variant: StripeVariant,
}

impl Default for StripeConfig {
    fn default() -> Self {
        StripeConfig {
            g: 4,
            variant: StripeVariant::Full,
        }
    }
}

/// `σ = flatten(Tᵀ)` for `T` the `(N/g) × g` view of `pi`.
pub fn interleave(pi: &Permutation, g: usize) -> Result<Permutation> {
    let n = pi.len();
    check_divisible("token count vs. stripe groups", n, g)?;
    let rows = n / g;
    let src = pi.forward();
    let mut sigma = Vec::with_capacity(n);
    for col in 0..g {
        sigma.extend((0..rows).map(|t| src[t * g + col]));
    }
    Ok(Permutation::from_forward_unchecked(sigma))
}

/// Applies `cfg.variant` to the importance order `pi`. `morton` is the plain
/// Z-order of the same grid, used by [`StripeVariant::NoSort`].
pub fn stripe_sort(pi: &Permutation, morton: &Permutation, cfg: &StripeConfig) -> Result<Permutation> {
    if pi.len() != morton.len() {
        return Err(Error::shape(format!(
            "importance order of length {} vs. morton order of length {}",
            pi.len(),
            morton.len()
        )));
    }
    match cfg.variant {
        StripeVariant::Full => interleave(pi, cfg.g),
        StripeVariant::NoInterleave => {
            check_divisible("token count vs. stripe groups", pi.len(), cfg.g)?;
            Ok(pi.clone())
        }
        StripeVariant::NoSort => interleave(morton, cfg.g),
    }
}

/// Saliency map to final scan order `σ` in one step.
pub fn scan_order(m: &SaliencyMap, ordering: &OrderingConfig, stripe: &StripeConfig) -> Result<Permutation> {
    let morton = morton_order(m.shape());
    let pi = match stripe.variant {
        StripeVariant::NoSort => morton.clone(),
        _ => importance_order(m, ordering)?,
    };
    stripe_sort(&pi, &morton, stripe)
}

/// Token sets of the `g` contiguous blocks of `sigma`.
pub fn block_members(sigma: &Permutation, g: usize) -> Result<Vec<Vec<usize>>> {
    check_divisible("token count vs. stripe groups", sigma.len(), g)?;
    let len = sigma.len() / g;
    Ok(sigma.forward().chunks(len).map(<[usize]>::to_vec).collect())
}

/// Block id of every row-major token, for block-membership images.
pub fn block_map(sigma: &Permutation, g: usize) -> Result<Vec<usize>> {
    let blocks = block_members(sigma, g)?;
    let mut map = vec![0; sigma.len()];
    for (b, members) in blocks.iter().enumerate() {
        for &t in members {
            map[t] = b;
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{apply_permutation, GridShape};
    use crate::tensor::{Rng, Tensor};

    fn reshape_transpose_flatten(pi: &[usize], g: usize) -> Vec<usize> {
        let rows = pi.len() / g;
        let t: Vec<Vec<usize>> = (0..rows).map(|r| pi[r * g..(r + 1) * g].to_vec()).collect();
        let mut out = Vec::new();
        for c in 0..g {
            for row in &t {
                out.push(row[c]);
            }
        }
        out
    }

    #[test]
    fn eight_tokens_four_groups() {
        let p = [5, 2, 7, 0, 1, 6, 3, 4];
        let sigma = interleave(&Permutation::new(p.to_vec()).unwrap(), 4).unwrap();
        assert_eq!(sigma.forward(), &[p[0], p[4], p[1], p[5], p[2], p[6], p[3], p[7]]);
    }

    #[test]
    fn one_group_is_identity_map() {
        let mut rng = Rng::new(3);
        let pi = Permutation::random(12, &mut rng);
        assert_eq!(interleave(&pi, 1).unwrap(), pi);
    }

    #[test]
    fn matches_reshape_oracle() {
        let mut rng = Rng::new(6);
        for _ in 0..50 {
            let pi = Permutation::random(64, &mut rng);
            let sigma = interleave(&pi, 4).unwrap();
            assert_eq!(
                sigma.forward(),
                reshape_transpose_flatten(pi.forward(), 4).as_slice()
            );
        }
    }

    #[test]
    fn rejects_indivisible() {
        let pi = Permutation::identity(10);
        let m = Permutation::identity(10);
        for variant in [
            StripeVariant::Full,
            StripeVariant::NoInterleave,
            StripeVariant::NoSort,
        ] {
            let err = stripe_sort(&pi, &m, &StripeConfig { g: 4, variant }).unwrap_err();
            assert!(matches!(err, Error::NotDivisible { n: 10, by: 4, .. }));
        }
        assert!(block_members(&pi, 3).is_err());
    }

    #[test]
    fn variants() {
        let mut rng = Rng::new(1);
        let pi = Permutation::random(16, &mut rng);
        let morton = morton_order(GridShape::square(4).unwrap());
        let cfg = |variant| StripeConfig { g: 4, variant };
        assert_eq!(
            stripe_sort(&pi, &morton, &cfg(StripeVariant::NoInterleave)).unwrap(),
            pi
        );
        assert_eq!(
            stripe_sort(&pi, &morton, &cfg(StripeVariant::NoSort)).unwrap(),
            interleave(&morton, 4).unwrap()
        );
        assert_eq!(
            stripe_sort(&pi, &morton, &cfg(StripeVariant::Full)).unwrap(),
            interleave(&pi, 4).unwrap()
        );
    }

    #[test]
    fn identity_blocks() {
        let blocks = block_members(&Permutation::identity(8), 2).unwrap();
        assert_eq!(blocks, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
    }

    #[test]
    fn blocks_partition_tokens() {
        let mut rng = Rng::new(10);
        for _ in 0..200 {
            let g = rng.range_inclusive(1, 6);
            let n = g * rng.range_inclusive(1, 10);
            let sigma = Permutation::random(n, &mut rng);
            let blocks = block_members(&sigma, g).unwrap();
            assert_eq!(blocks.len(), g);
            let mut seen = vec![false; n];
            for b in &blocks {
                assert_eq!(b.len(), n / g);
                for &t in b {
                    assert!(!seen[t]);
                    seen[t] = true;
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn uniform_four_by_four_blocks_are_phase_grids() {
        let shape = GridShape::square(4).unwrap();
        let sigma = scan_order(
            &SaliencyMap::uniform(shape, 1.0),
            &OrderingConfig::default(),
            &StripeConfig::default(),
        )
        .unwrap();
        let blocks = block_members(&sigma, 4).unwrap();
        // Offset of block g inside every 2x2 Morton block: (0,0), (1,0), (0,1), (1,1).
        for (g, (dx, dy)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
            let mut want: Vec<usize> = Vec::new();
            for by in 0..2 {
                for bx in 0..2 {
                    want.push(shape.index(2 * bx + dx, 2 * by + dy));
                }
            }
            want.sort();
            let mut got = blocks[g].clone();
            got.sort();
            assert_eq!(got, want, "block {g}");
        }
    }

    #[test]
    fn uniform_blocks_cover_every_quadrant() {
        for side in [4, 8, 16, 32] {
            let shape = GridShape::square(side).unwrap();
            let sigma = scan_order(
                &SaliencyMap::uniform(shape, 1.0),
                &OrderingConfig::default(),
                &StripeConfig::default(),
            )
            .unwrap();
            for block in block_members(&sigma, 4).unwrap() {
                let mut quadrants = [false; 4];
                for t in block {
                    let (x, y) = shape.coords(t);
                    quadrants[(y >= side / 2) as usize * 2 + (x >= side / 2) as usize] = true;
                }
                assert!(quadrants.iter().all(|&q| q), "side {side}");
            }
        }
    }

    #[test]
    fn permute_then_unpermute_is_exact() {
        let mut rng = Rng::new(13);
        let shape = GridShape::square(8).unwrap();
        let vals: Vec<f32> = (0..64).map(|_| rng.uniform()).collect();
        let sigma = scan_order(
            &SaliencyMap::new(shape, vals).unwrap(),
            &OrderingConfig::default(),
            &StripeConfig::default(),
        )
        .unwrap();
        let t = Tensor::randn(&[64, 5], 1.0, &mut rng);
        let there = apply_permutation(&sigma, &t).unwrap();
        assert_eq!(apply_permutation(&sigma.invert(), &there).unwrap(), t);
    }

    #[test]
    fn block_map_labels() {
        let sigma = Permutation::new(vec![3, 1, 0, 2]).unwrap();
        assert_eq!(block_map(&sigma, 2).unwrap(), vec![1, 0, 1, 0]);
    }
}
