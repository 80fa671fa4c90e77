use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-12;

/// `u_i = ‖Δ_i‖₂` per row.
pub fn update_magnitudes(delta: &Tensor) -> Tensor {
    let u = (0..delta.rows())
        .map(|i| {
            delta
                .row(i)
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt() as f32
        })
        .collect();
    Tensor::from_vec(u).expect("at least one row")
}

/// Mean cosine distance of each token to all others:
/// `d_i = 1/(N−1) · Σ_{j≠i} (1 − cos(x_i, x_j))`, in `[0, 2]`.
///
/// Uses `Σ_{j≠i} cos(x_i, x_j) = x̂_i · (Σ_j x̂_j) − ‖x̂_i‖²` so the cost is
/// linear in `N`. Norms are floored at `1e-12`.
pub fn token_dissimilarity(x: &Tensor) -> Tensor {
    let n = x.rows();
    if n < 2 {
        return Tensor::zeros(&[n]);
    }
    let d = x.row_len();
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row = x.row(i);
            let norm = row
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt()
                .max(NORM_EPS);
            row.iter().map(|&v| v as f64 / norm).collect()
        })
        .collect();
    let mut total = vec![0.0f64; d];
    for u in &unit {
        for (t, v) in total.iter_mut().zip(u) {
            *t += v;
        }
    }
    let out = unit
        .iter()
        .map(|u| {
            let self_dot: f64 = u.iter().map(|v| v * v).sum();
            let cross: f64 = u.iter().zip(&total).map(|(a, b)| a * b).sum::<f64>() - self_dot;
            let mean_cos = cross / (n - 1) as f64;
            (1.0 - mean_cos).clamp(0.0, 2.0) as f32
        })
        .collect();
    Tensor::from_vec(out).expect("n >= 2")
}

/// Pearson correlation of two equal-length series.
pub fn pearson(a: &Tensor, b: &Tensor) -> Result<f64> {
    let n = a.len();
    if b.len() != n {
        return Err(Error::shape(format!("pearson: lengths {n} and {}", b.len())));
    }
    if n < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two samples"));
    }
    let mean = |t: &Tensor| t.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input"));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}
