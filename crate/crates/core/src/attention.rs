//! Dense reference attention and the A-shape block-sparse online-softmax
//! kernel, both with decomposed 2D relative-position bias.
//!
//! Inputs arrive in permuted (scan) order. `sq_perm` / `sk_perm` map a
//! permuted position back to its spatial index, which is what the bias tables
//! are addressed with:
//!
//! ```text
//! B[q, k] = bh[q, k / w] + bw[q, k % w]        (q, k spatial, w² = S_k)
//! O = softmax(τ·QKᵀ + B̂) · V,   B̂[i, j] = B[sq_perm(i), sk_perm(j)]
//! ```

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Permutation;
use crate::tensor::{Rng, Tensor};

/// Tile side for local (windowed) layers.
pub const LOCAL_TILE: usize = 32;
/// Tile side for global layers.
pub const GLOBAL_TILE: usize = 128;

/// Row and column bias tables, each `[S_q, w]`, indexed by spatial query.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasTables {
    bh: Tensor,
    bw: Tensor,
    w: usize,
}

impl BiasTables {
    pub fn new(bh: Tensor, bw: Tensor) -> Result<Self> {
        let (s_q, w) = bh.dims2()?;
        if bw.shape() != bh.shape() {
            return Err(Error::shape(format!(
                "bias tables differ in shape: {:?} vs {:?}",
                bh.shape(),
                bw.shape()
            )));
        }
        debug_assert!(s_q > 0);
        Ok(BiasTables { bh, bw, w })
    }

    pub fn zeros(s_q: usize, w: usize) -> Self {
        BiasTables {
            bh: Tensor::zeros(&[s_q, w]),
            bw: Tensor::zeros(&[s_q, w]),
            w,
        }
    }

    pub fn random(s_q: usize, w: usize, std: f32, rng: &mut Rng) -> Self {
        BiasTables {
            bh: Tensor::randn(&[s_q, w], std, rng),
            bw: Tensor::randn(&[s_q, w], std, rng),
            w,
        }
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn s_q(&self) -> usize {
        self.bh.rows()
    }

    pub fn bh(&self) -> &Tensor {
        &self.bh
    }

    pub fn bw(&self) -> &Tensor {
        &self.bw
    }

    /// Bias between spatial query `q` and spatial key `k`.
    pub fn at(&self, q: usize, k: usize) -> f32 {
        self.bh.row(q)[k / self.w] + self.bw.row(q)[k % self.w]
    }

    /// Adds `c` to every entry of the row table, shifting every logit of
    /// every query by `c`.
    pub fn shifted(&self, c: f32) -> BiasTables {
        let mut bh = self.bh.clone();
        bh.data_mut().iter_mut().for_each(|v| *v += c);
        BiasTables {
            bh,
            bw: self.bw.clone(),
            w: self.w,
        }
    }
}

/// Static sparsity schedule of the A-shape kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AShapeConfig {
    pub b_row: usize,
    pub b_col: usize,
    /// Fraction of key tiles in the dense prefix, in `[0, 1]`.
    pub r: f64,
    /// Softmax scale applied to `QKᵀ`.
    pub tau: f32,
}

impl AShapeConfig {
    pub fn new(b_row: usize, b_col: usize, r: f64, tau: f32) -> Result<Self> {
        let cfg = AShapeConfig { b_row, b_col, r, tau };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Square tiles of side `tile` with `τ = 1/√head_dim`.
    pub fn square(tile: usize, r: f64, head_dim: usize) -> Result<Self> {
        Self::new(tile, tile, r, 1.0 / (head_dim as f32).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_row == 0 || self.b_col == 0 {
            return Err(Error::config("tile sizes must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::config(format!("density r = {} outside [0, 1]", self.r)));
        }
        if !self.tau.is_finite() {
            return Err(Error::config("softmax scale must be finite"));
        }
        Ok(())
    }
}

/// Active key tiles `J_i` of every query tile `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    t_col: usize,
    sets: Vec<Vec<usize>>,
}

impl ActiveSet {
    pub fn t_row(&self) -> usize {
        self.sets.len()
    }

    pub fn t_col(&self) -> usize {
        self.t_col
    }

    /// Sorted key-tile indices for query tile `i`.
    pub fn tiles(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    /// Total number of (query tile, key tile) pairs visited.
    pub fn pairs(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }
}

/// Number of key tiles in the dense prefix, `⌊r · t_col⌋`.
pub fn prefix_tiles(t_col: usize, r: f64) -> usize {
    ((r * t_col as f64).floor() as usize).min(t_col)
}

/// `J_i = {0, …, ⌊r·t_col⌋ − 1} ∪ {i}`.
///
/// When there are more query tiles than key tiles the diagonal of a query
/// tile past the last key tile is clamped to `t_col − 1`.
pub fn build_active_set(t_row: usize, t_col: usize, r: f64) -> ActiveSet {
    assert!(t_row >= 1 && t_col >= 1, "tile counts must be positive");
    let prefix = prefix_tiles(t_col, r);
    let sets = (0..t_row)
        .map(|i| {
            let diag = i.min(t_col - 1);
            let mut j: Vec<usize> = (0..prefix).collect();
            if diag >= prefix {
                j.push(diag);
            }
            j
        })
        .collect();
    ActiveSet { t_col, sets }
}

/// Fraction of tile pairs visited, `Σ|J_i| / (t_row · t_col)`.
pub fn achieved_density(t_row: usize, t_col: usize, r: f64) -> f64 {
    build_active_set(t_row, t_col, r).pairs() as f64 / (t_row * t_col) as f64
}

pub(crate) fn tile_count(len: usize, tile: usize) -> usize {
    len.div_ceil(tile)
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 8;
    let mut acc = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let (x, y) = (&a[c * LANES..(c + 1) * LANES], &b[c * LANES..(c + 1) * LANES]);
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for p in chunks * LANES..a.len() {
        s += a[p] * b[p];
    }
    s
}

#[inline]
fn exp_guarded(x: f32) -> f32 {
    if x == f32::NEG_INFINITY {
        0.0
    } else {
        x.exp()
    }
}

struct Dims {
    s_q: usize,
    s_k: usize,
    dv: usize,
}

fn check_inputs(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: &BiasTables,
    sq_perm: &Permutation,
    sk_perm: &Permutation,
) -> Result<Dims> {
    let (s_q, d) = q.dims2()?;
    let (s_k, dk) = k.dims2()?;
    let (s_v, dv) = v.dims2()?;
    if dk != d {
        return Err(Error::shape(format!("q width {d} vs k width {dk}")));
    }
    if s_v != s_k {
        return Err(Error::shape(format!("{s_k} keys but {s_v} values")));
    }
    if bias.w() * bias.w() != s_k {
        return Err(Error::shape(format!(
            "bias grid side {} does not square to S_k = {s_k}",
            bias.w()
        )));
    }
    if bias.s_q() != s_q {
        return Err(Error::shape(format!(
            "bias tables have {} query rows, S_q = {s_q}",
            bias.s_q()
        )));
    }
    if sq_perm.len() != s_q || sk_perm.len() != s_k {
        return Err(Error::shape(format!(
            "permutation lengths {}/{} for S_q = {s_q}, S_k = {s_k}",
            sq_perm.len(),
            sk_perm.len()
        )));
    }
    Ok(Dims { s_q, s_k, dv })
}

/// `softmax(τ·QKᵀ + B̂)·V` through an explicit `S_q × S_k` score matrix.
pub fn dense_attention_ref(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: &BiasTables,
    sq_perm: &Permutation,
    sk_perm: &Permutation,
    tau: f32,
) -> Result<Tensor> {
    let Dims { s_q, s_k, dv, .. } = check_inputs(q, k, v, bias, sq_perm, sk_perm)?;
    let mut scores = vec![0.0f32; s_q * s_k];
    scores.par_chunks_mut(s_k).enumerate().for_each(|(i, row)| {
        let qi = q.row(i);
        let sq = sq_perm.forward()[i];
        for (j, s) in row.iter_mut().enumerate() {
            *s = tau * dot(qi, k.row(j)) + bias.at(sq, sk_perm.forward()[j]);
        }
    });
    let mut out = vec![0.0f32; s_q * dv];
    out.par_chunks_mut(dv)
        .zip(scores.par_chunks_mut(s_k))
        .for_each(|(o, row)| {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            for s in row.iter_mut() {
                *s = exp_guarded(*s - max);
                denom += *s;
            }
            for (j, &p) in row.iter().enumerate() {
                for (acc, &vv) in o.iter_mut().zip(v.row(j)) {
                    *acc += p * vv;
                }
            }
            o.iter_mut().for_each(|x| *x /= denom);
        });
    Tensor::new(vec![s_q, dv], out)?.ensure_finite("dense_attention_ref")
}

/// Block-sparse attention over the A-shape active set with a streaming
/// (online) softmax.
///
/// For each query tile `i` and each key tile `j ∈ J_i` in ascending order the
/// kernel forms the tile scores, adds the gathered bias, masks columns past
/// `S_k` to `-∞`, and folds the tile into the running row max `m`, denominator
/// `ℓ` and accumulator `O_acc`:
///
/// ```text
/// m' = max(m, rowmax S)   P = exp(S − m')   α = exp(m − m')
/// ℓ  = α·ℓ + rowsum P     O_acc = α·O_acc + P·V_j
/// ```
///
/// and finally `O_i = O_acc / ℓ`. Scores are held as `τ·QKᵀ + B`, i.e. the
/// unscaled form `QKᵀ + B/τ` multiplied through by `τ`; the exponentials are
/// identical and `τ = 0` stays well defined.
///
/// Query tiles are independent and each visits its key tiles in a fixed
/// order, so the result does not depend on the thread schedule.
pub fn ashape_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: &BiasTables,
    sq_perm: &Permutation,
    sk_perm: &Permutation,
    cfg: &AShapeConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let Dims { s_q, s_k, dv, .. } = check_inputs(q, k, v, bias, sq_perm, sk_perm)?;
    let (b_row, b_col, tau) = (cfg.b_row, cfg.b_col, cfg.tau);
    let active = build_active_set(tile_count(s_q, b_row), tile_count(s_k, b_col), cfg.r);
    let w = bias.w();
    // Spatial row/column of every permuted key position, for the bias gather.
    let key_rc: Vec<(usize, usize)> = sk_perm.forward().iter().map(|&s| (s / w, s % w)).collect();

    let mut out = vec![0.0f32; s_q * dv];
    out.par_chunks_mut(b_row * dv)
        .enumerate()
        .try_for_each(|(i, o_tile)| -> Result<()> {
            let rows = o_tile.len() / dv;
            let q0 = i * b_row;
            let bias_rows: Vec<(&[f32], &[f32])> = (0..rows)
                .map(|r| {
                    let sq = sq_perm.forward()[q0 + r];
                    (bias.bh().row(sq), bias.bw().row(sq))
                })
                .collect();
            let mut m = vec![f32::NEG_INFINITY; rows];
            let mut l = vec![0.0f32; rows];
            o_tile.fill(0.0);
            let mut s = vec![0.0f32; b_col];
            for &j in active.tiles(i) {
                let k0 = j * b_col;
                let valid = b_col.min(s_k - k0);
                for r in 0..rows {
                    let qr = q.row(q0 + r);
                    let (bh, bw) = bias_rows[r];
                    for (c, sc) in s.iter_mut().enumerate() {
                        *sc = if c < valid {
                            let (kr, kc) = key_rc[k0 + c];
                            tau * dot(qr, k.row(k0 + c)) + (bh[kr] + bw[kc])
                        } else {
                            f32::NEG_INFINITY
                        };
                    }
                    let m_new = s.iter().copied().fold(m[r], f32::max);
                    if m_new == f32::NEG_INFINITY {
                        return Err(Error::shape(format!("query row {} has no unmasked key", q0 + r)));
                    }
                    let alpha = exp_guarded(m[r] - m_new);
                    let acc = &mut o_tile[r * dv..(r + 1) * dv];
                    if alpha != 1.0 {
                        acc.iter_mut().for_each(|a| *a *= alpha);
                    }
                    let mut rowsum = 0.0f32;
                    for (c, &sc) in s[..valid].iter().enumerate() {
                        let p = exp_guarded(sc - m_new);
                        rowsum += p;
                        for (a, &vv) in acc.iter_mut().zip(v.row(k0 + c)) {
                            *a += p * vv;
                        }
                    }
                    l[r] = alpha * l[r] + rowsum;
                    m[r] = m_new;
                }
            }
            for (r, acc) in o_tile.chunks_mut(dv).enumerate() {
                acc.iter_mut().for_each(|a| *a /= l[r]);
            }
            Ok(())
        })?;
    Tensor::new(vec![s_q, dv], out)?.ensure_finite("ashape_attention")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::tensor::max_rel_err;

    struct Case {
        q: Tensor,
        k: Tensor,
        v: Tensor,
        bias: BiasTables,
        sq: Permutation,
        sk: Permutation,
        tau: f32,
    }

    fn case(rng: &mut Rng, s_q: usize, w: usize, d: usize) -> Case {
        let s_k = w * w;
        Case {
            q: Tensor::randn(&[s_q, d], 1.0, rng),
            k: Tensor::randn(&[s_k, d], 1.0, rng),
            v: Tensor::randn(&[s_k, d], 1.0, rng),
            bias: BiasTables::random(s_q, w, 0.5, rng),
            sq: Permutation::random(s_q, rng),
            sk: Permutation::random(s_k, rng),
            tau: 1.0 / (d as f32).sqrt(),
        }
    }

    impl Case {
        fn dense(&self) -> Tensor {
            dense_attention_ref(
                &self.q, &self.k, &self.v, &self.bias, &self.sq, &self.sk, self.tau,
            )
            .unwrap()
        }

        fn ashape(&self, b: usize, r: f64) -> Tensor {
            let cfg = AShapeConfig::new(b, b, r, self.tau).unwrap();
            ashape_attention(&self.q, &self.k, &self.v, &self.bias, &self.sq, &self.sk, &cfg).unwrap()
        }

        fn masked_oracle(&self, b: usize, r: f64) -> Tensor {
            let active = build_active_set(tile_count(self.q.rows(), b), tile_count(self.k.rows(), b), r);
            oracle::attention_scalar(
                &self.q,
                &self.k,
                &self.v,
                &self.bias,
                &self.sq,
                &self.sk,
                self.tau,
                |row, col| active.tiles(row / b).contains(&(col / b)),
            )
        }
    }

    #[test]
    fn active_set_formula() {
        let a = build_active_set(8, 8, 0.25);
        assert_eq!(a.tiles(5), &[0, 1, 5]);
        assert_eq!(a.tiles(1), &[0, 1]);
        for i in 0..8 {
            assert_eq!(build_active_set(8, 8, 0.0).tiles(i), &[i]);
            assert_eq!(build_active_set(8, 8, 1.0).tiles(i), (0..8).collect::<Vec<_>>());
        }
        // More query tiles than key tiles: the diagonal clamps to the last key tile.
        assert_eq!(build_active_set(4, 2, 0.0).tiles(3), &[1]);
    }

    #[test]
    fn density_values() {
        assert_eq!(achieved_density(8, 8, 0.25), 0.34375);
        assert_eq!(achieved_density(5, 7, 1.0), 1.0);
        assert_eq!(achieved_density(6, 6, 0.0), 1.0 / 6.0);
    }

    #[test]
    fn single_key_returns_value() {
        let mut rng = Rng::new(1);
        let q = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let id = Permutation::identity(1);
        let out = dense_attention_ref(&q, &k, &v, &BiasTables::zeros(1, 1), &id, &id, 0.7).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn zero_scale_averages_values() {
        let mut rng = Rng::new(2);
        let c = case(&mut rng, 5, 3, 4);
        let bias = BiasTables::zeros(5, 3);
        let out = dense_attention_ref(&c.q, &c.k, &c.v, &bias, &c.sq, &c.sk, 0.0).unwrap();
        for i in 0..5 {
            for col in 0..4 {
                let mean: f32 = (0..9).map(|j| c.v.row(j)[col]).sum::<f32>() / 9.0;
                assert!((out.row(i)[col] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dense_matches_scalar_loop() {
        let mut rng = Rng::new(3);
        let mut c = case(&mut rng, 12, 3, 4);
        c.bias = BiasTables::random(12, 3, 2.0, &mut rng);
        let want = oracle::attention_scalar(&c.q, &c.k, &c.v, &c.bias, &c.sq, &c.sk, c.tau, |_, _| true);
        assert!(max_rel_err(&c.dense(), &want) <= 1e-5);
    }

    #[test]
    fn full_density_matches_dense() {
        let mut rng = Rng::new(4);
        for (s_q, w, b) in [(16, 4, 4), (30, 5, 8), (49, 7, 16), (7, 3, 2)] {
            let c = case(&mut rng, s_q, w, 8);
            assert!(max_rel_err(&c.ashape(b, 1.0), &c.dense()) <= 1e-4);
        }
    }

    #[test]
    fn one_tile_is_exactly_dense_path() {
        let mut rng = Rng::new(5);
        let c = case(&mut rng, 16, 4, 8);
        // One tile streams once, reproducing the dense reduction order.
        assert_eq!(c.ashape(16, 0.0), c.dense());
    }

    #[test]
    fn sparse_matches_masked_oracle() {
        let mut rng = Rng::new(6);
        let c = case(&mut rng, 256, 16, 16);
        for r in [0.0, 0.25, 0.5] {
            let err = max_rel_err(&c.ashape(32, r), &c.masked_oracle(32, r));
            assert!(err <= 1e-4, "r = {r}: {err}");
        }
    }

    #[test]
    fn ragged_last_tile() {
        let mut rng = Rng::new(7);
        let c = case(&mut rng, 25, 5, 4);
        for r in [0.0, 0.4, 1.0] {
            let err = max_rel_err(&c.ashape(8, r), &c.masked_oracle(8, r));
            assert!(err <= 1e-4, "r = {r}: {err}");
        }
    }

    #[test]
    fn tile_size_independent_at_full_density() {
        let mut rng = Rng::new(8);
        let c = case(&mut rng, 256, 16, 16);
        let base = c.ashape(16, 1.0);
        for b in [32, 64, 128] {
            assert!(max_rel_err(&c.ashape(b, 1.0), &base) <= 1e-4);
        }
    }

    #[test]
    fn shift_invariance_and_row_stochastic() {
        let mut rng = Rng::new(9);
        let c = case(&mut rng, 16, 4, 4);
        let shifted = c.bias.shifted(37.5);
        for r in [0.0, 0.5, 1.0] {
            let cfg = AShapeConfig::new(4, 4, r, c.tau).unwrap();
            let a = ashape_attention(&c.q, &c.k, &c.v, &c.bias, &c.sq, &c.sk, &cfg).unwrap();
            let b = ashape_attention(&c.q, &c.k, &c.v, &shifted, &c.sq, &c.sk, &cfg).unwrap();
            assert!(crate::tensor::max_abs_diff(&a, &b) < 1e-5);

            let probe = Tensor::identity(16);
            let weights = ashape_attention(&c.q, &c.k, &probe, &c.bias, &c.sq, &c.sk, &cfg).unwrap();
            for i in 0..16 {
                let s: f32 = weights.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
                assert!(weights.row(i).iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = Rng::new(10);
        let c = case(&mut rng, 9, 3, 4);
        let id9 = Permutation::identity(9);
        let bad_bias = BiasTables::zeros(9, 2);
        assert!(dense_attention_ref(&c.q, &c.k, &c.v, &bad_bias, &c.sq, &c.sk, 1.0).is_err());
        assert!(
            dense_attention_ref(&c.q, &c.k, &c.v, &c.bias, &Permutation::identity(8), &id9, 1.0).is_err()
        );
        let short_v = Tensor::zeros(&[8, 4]);
        assert!(dense_attention_ref(&c.q, &c.k, &short_v, &c.bias, &c.sq, &c.sk, 1.0).is_err());
        assert!(AShapeConfig::new(0, 4, 0.5, 1.0).is_err());
        assert!(AShapeConfig::new(4, 4, 1.5, 1.0).is_err());
    }

    #[test]
    fn deterministic_across_runs() {
        let mut rng = Rng::new(11);
        let c = case(&mut rng, 64, 8, 8);
        let a = c.ashape(8, 0.25);
        let b = c.ashape(8, 0.25);
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
