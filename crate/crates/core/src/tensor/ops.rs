use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// Default LayerNorm epsilon.
pub const LAYERNORM_EPS: f32 = 1e-6;

/// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// `c = a · b` for rank-2 `a: [m, k]` and `b: [k, n]`.
///
/// Every output element is accumulated from `0.0` in ascending `p` order, the
/// same order as the textbook triple loop, so serial and row-parallel
/// schedules agree bit for bit.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul: [{m}, {k}] x [{k2}, {n}] inner extents differ"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    let ad = a.data();
    let bd = b.data();
    let row = |(i, c_row): (usize, &mut [f32])| {
        let a_row = &ad[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &bd[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += aip * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    Tensor::new(vec![m, n], out)?.ensure_finite("matmul")
}

/// Adds `bias` (length = row length) to every row.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.row_len();
    if bias.len() != c {
        return Err(Error::shape(format!(
            "bias of length {} for rows of length {c}",
            bias.len()
        )));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    out.ensure_finite("add_row_bias")
}

/// Per-row LayerNorm over the last extent using the population variance.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = *x.shape().last().unwrap();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(format!(
            "layernorm: gamma/beta lengths {}/{} for feature width {d}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        layernorm_row(row, gamma.data(), beta.data(), eps);
    }
    out.ensure_finite("layernorm")
}

pub(crate) fn layernorm_row(row: &mut [f32], gamma: &[f32], beta: &[f32], eps: f32) {
    let d = row.len() as f32;
    let mean = row.iter().sum::<f32>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
        *v = (*v - mean) * inv * g + b;
    }
}

/// Exact GELU, `x * Φ(x)` with Φ written through `erf`, evaluated in f64.
pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))) as f32
}

pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = gelu_scalar(*v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
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

    #[test]
    fn identity_is_neutral() {
        let mut rng = Rng::new(3);
        let m = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let i = Tensor::identity(3);
        assert_eq!(matmul(&i, &m).unwrap(), m);
        assert_eq!(matmul(&m, &i).unwrap(), m);
    }

    #[test]
    fn small_hand_case() {
        let a = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5., 6.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17., 39.]);
    }

    #[test]
    fn matches_naive_triple_loop_exactly() {
        let mut rng = Rng::new(11);
        for (m, k, n) in [(7, 9, 5), (64, 64, 64), (1, 33, 2)] {
            let a = Tensor::randn(&[m, k], 1.0, &mut rng);
            let b = Tensor::randn(&[k, n], 1.0, &mut rng);
            let got = matmul(&a, &b).unwrap();
            let want = naive_matmul(&a, &b);
            assert_eq!(got, want, "{m}x{k}x{n}");
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matmul(&a, &a).is_err());
        assert!(matmul(&Tensor::zeros(&[2]), &a).is_err());
    }

    #[test]
    fn layernorm_hand_cases() {
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let c = Tensor::new(vec![1, 3], vec![5.0; 3]).unwrap();
        assert_eq!(layernorm(&c, &ones, &zeros, 1e-6).unwrap().data(), &[0.0; 3]);

        let x = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        assert_eq!(layernorm(&x, &g, &b, 0.0).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn layernorm_matches_direct_formula() {
        let mut rng = Rng::new(5);
        let x = Tensor::randn(&[16, 8], 2.0, &mut rng);
        let g = Tensor::randn(&[8], 1.0, &mut rng);
        let b = Tensor::randn(&[8], 1.0, &mut rng);
        let got = layernorm(&x, &g, &b, 1e-6).unwrap();
        for r in 0..16 {
            let row: Vec<f64> = x.row(r).iter().map(|&v| v as f64).collect();
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for (c, &xc) in row.iter().enumerate() {
                let want = (xc - mean) / (var + 1e-6).sqrt() * g.data()[c] as f64 + b.data()[c] as f64;
                let diff = (got.row(r)[c] as f64 - want).abs();
                assert!(diff < 1e-5, "row {r} col {c}: {diff}");
            }
        }
    }

    /// erf by its Maclaurin series, summed in f64 until terms vanish.
    fn erf_series(z: f64) -> f64 {
        let mut term = z;
        let mut sum = z;
        let mut n = 0.0;
        while term.abs() > 1e-20 {
            n += 1.0;
            term *= -z * z / n;
            sum += term / (2.0 * n + 1.0);
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        for x in [6.0f32, 10.0, 50.0] {
            assert!((gelu_scalar(x) - x).abs() <= 1e-6 * x, "{x}");
        }
        let want = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
        assert!((gelu_scalar(1.0) as f64 - want).abs() < 1e-7);
        for x in [-2.5f64, -0.3, 0.7, 2.2] {
            let want = 0.5 * x * (1.0 + erf_series(x / 2f64.sqrt()));
            assert!((gelu_scalar(x as f32) as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_monotone_above_its_minimum() {
        // The exact GELU dips to about -0.17 near x = -0.7518 and increases after.
        let mut prev = gelu_scalar(-0.75);
        let mut x = -0.75f32;
        while x < 8.0 {
            x += 1e-3;
            let y = gelu_scalar(x);
            assert!(y >= prev, "gelu decreased at {x}");
            prev = y;
        }
    }
}
