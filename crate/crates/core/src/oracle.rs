//! Straight-line reference implementations used to cross-check the kernels.
//!
//! Everything here is written as plain scalar loops, mostly in `f64`, and
//! shares no code with the optimized paths it checks.

#![allow(clippy::needless_range_loop)]

use crate::attention::BiasTables;
use crate::grid::Permutation;
use crate::mlp::MlpWeights;
use crate::tensor::Tensor;

/// Softmax attention restricted to the `(row, col)` pairs for which `keep`
/// returns true, computed entry by entry in `f64`. Rows and columns are in
/// permuted order; `sq` / `sk` map them to spatial indices for the bias.
#[allow(clippy::too_many_arguments)]
pub fn attention_scalar(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: &BiasTables,
    sq: &Permutation,
    sk: &Permutation,
    tau: f32,
    keep: impl Fn(usize, usize) -> bool,
) -> Tensor {
    let (s_q, d) = (q.shape()[0], q.shape()[1]);
    let s_k = k.shape()[0];
    let dv = v.shape()[1];
    let w = bias.w();
    let mut out = Tensor::zeros(&[s_q, dv]);
    for i in 0..s_q {
        let qs = sq.forward()[i];
        let mut logits = Vec::with_capacity(s_k);
        for j in 0..s_k {
            if !keep(i, j) {
                logits.push(None);
                continue;
            }
            let mut s = 0.0f64;
            for p in 0..d {
                s += q.data()[i * d + p] as f64 * k.data()[j * d + p] as f64;
            }
            let ks = sk.forward()[j];
            let b = bias.bh().data()[qs * w + ks / w] as f64 + bias.bw().data()[qs * w + ks % w] as f64;
            logits.push(Some(tau as f64 * s + b));
        }
        let max = logits.iter().flatten().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut denom = 0.0;
        let mut acc = vec![0.0f64; dv];
        for (j, l) in logits.iter().enumerate() {
            if let Some(l) = l {
                let p = (l - max).exp();
                denom += p;
                for c in 0..dv {
                    acc[c] += p * v.data()[j * dv + c] as f64;
                }
            }
        }
        for c in 0..dv {
            out.data_mut()[i * dv + c] = (acc[c] / denom) as f32;
        }
    }
    out
}

/// Textbook triple-loop matmul with an `f32` accumulator.
pub fn matmul_naive(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut c = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0f32;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            c.data_mut()[i * n + j] = s;
        }
    }
    c
}

/// Membership test `j ∈ J_i` evaluated pair by pair.
pub fn in_active_set(i: usize, j: usize, t_col: usize, r: f64) -> bool {
    let prefix = (r * t_col as f64).floor() as usize;
    j < prefix || j == i.min(t_col - 1)
}

/// Density by enumerating every tile pair.
pub fn density_enumerated(t_row: usize, t_col: usize, r: f64) -> f64 {
    let mut hits = 0usize;
    for i in 0..t_row {
        for j in 0..t_col {
            hits += in_active_set(i, j, t_col, r) as usize;
        }
    }
    hits as f64 / (t_row * t_col) as f64
}

/// Reshape `pi` to `(N/g) × g`, transpose, and flatten.
pub fn reshape_transpose_flatten(pi: &[usize], g: usize) -> Vec<usize> {
    let rows = pi.len() / g;
    let t: Vec<&[usize]> = pi.chunks(g).collect();
    let mut out = Vec::with_capacity(pi.len());
    for c in 0..g {
        for row in t.iter().take(rows) {
            out.push(row[c]);
        }
    }
    out
}

fn erf_series(z: f64) -> f64 {
    // Maclaurin series; adequate for the |z| < 6 range used here.
    let mut term = z;
    let mut sum = z;
    let mut n = 0.0;
    while term.abs() > 1e-18 * sum.abs().max(1e-300) && n < 400.0 {
        n += 1.0;
        term *= -z * z / n;
        sum += term / (2.0 * n + 1.0);
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

fn gelu_f64(x: f64) -> f64 {
    if x > 6.0 {
        x
    } else if x < -6.0 {
        0.0
    } else {
        0.5 * x * (1.0 + erf_series(x / 2f64.sqrt()))
    }
}

/// `MLP(LN(x))` for a single token, in `f64`.
pub fn mlp_delta_scalar(x: &[f32], w: &MlpWeights, eps: f32) -> Vec<f64> {
    let d = x.len();
    let h = w.hidden();
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
    let ln: Vec<f64> = (0..d)
        .map(|c| {
            (x[c] as f64 - mean) / (var + eps as f64).sqrt() * w.ln_gamma.data()[c] as f64
                + w.ln_beta.data()[c] as f64
        })
        .collect();
    let hidden: Vec<f64> = (0..h)
        .map(|j| {
            let mut s = w.b1.data()[j] as f64;
            for c in 0..d {
                s += ln[c] * w.w1.data()[c * h + j] as f64;
            }
            gelu_f64(s)
        })
        .collect();
    (0..d)
        .map(|c| {
            let mut s = w.b2.data()[c] as f64;
            for j in 0..h {
                s += hidden[j] * w.w2.data()[j * d + c] as f64;
            }
            s
        })
        .collect()
}
