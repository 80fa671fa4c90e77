//! Lloyd's k-means with k-means++ seeding, used to replace tokens by their
//! cluster centroids.

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const KMEANS_DEFAULT_ITERS: usize = 25;

#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// Each row replaced by its assigned centroid.
    pub replaced: Tensor,
    /// Mean squared distance to the assigned centroid after the final assignment.
    pub distortion: f64,
    /// Distortion after every assignment step, first to last.
    pub history: Vec<f64>,
    pub assignments: Vec<usize>,
    pub centroids: Tensor,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.below(n)].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let mut cumulative = Vec::with_capacity(n);
        let mut total = 0.0;
        for &d in &nearest {
            total += d;
            cumulative.push(total);
        }
        let pick = if total > 0.0 {
            let target = rng.uniform_f64() * total;
            cumulative.iter().position(|&c| c > target).unwrap_or(n - 1)
        } else {
            // Every point coincides with a centroid; duplicates are all that is left.
            rng.below(n)
        };
        let c = points[pick].clone();
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Nearest centroid per point (ties go to the lower index) and the distances.
fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points
        .iter()
        .map(|p| {
            centroids
                .iter()
                .enumerate()
                .map(|(c, cen)| (c, sq_dist(p, cen)))
                .fold(
                    (0, f64::INFINITY),
                    |best, cur| if cur.1 < best.1 { cur } else { best },
                )
        })
        .unzip()
}

/// Clusters the rows of `x: [n, d]` into `k` groups and replaces every row
/// by its centroid.
///
/// Seeding is k-means++ from `seed`; at most `iters` Lloyd updates follow,
/// stopping early once assignments stop changing. A cluster left empty by an
/// update is re-seeded at the point farthest from its current centroid.
pub fn kmeans_replace(x: &Tensor, k: usize, seed: u64, iters: usize) -> Result<KmeansResult> {
    let (n, d) = x.dims2()?;
    if k == 0 || k > n {
        return Err(Error::config(format!("k = {k} outside [1, {n}]")));
    }
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| x.row(i).iter().map(|&v| v as f64).collect())
        .collect();
    let mut rng = Rng::new(seed);
    let mut centroids = seed_plus_plus(&points, k, &mut rng);
    let mut history = Vec::new();
    let mut prev: Option<Vec<usize>> = None;
    let mut it = 0;
    let (assignments, dists) = loop {
        let (a, dists) = assign(&points, &centroids);
        history.push(dists.iter().sum::<f64>() / n as f64);
        if it == iters || prev.as_ref() == Some(&a) {
            break (a, dists);
        }
        it += 1;

        let mut sums = vec![vec![0.0f64; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&a) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&i, &j| dists[i].total_cmp(&dists[j]).then(j.cmp(&i)))
                    .expect("k <= n leaves an untaken point");
                taken[far] = true;
                centroids[c] = points[far].clone();
            }
        }
        prev = Some(a);
    };

    let mut replaced = Tensor::zeros(&[n, d]);
    for (i, &c) in assignments.iter().enumerate() {
        for (o, v) in replaced.row_mut(i).iter_mut().zip(&centroids[c]) {
            *o = *v as f32;
        }
    }
    let cen = Tensor::new(
        vec![k, d],
        centroids.iter().flatten().map(|&v| v as f32).collect(),
    )?;
    Ok(KmeansResult {
        replaced,
        distortion: dists.iter().sum::<f64>() / n as f64,
        history,
        assignments,
        centroids: cen,
    })
}

/// `‖a − b‖_F / ‖b‖_F`.
pub fn relative_perturbation(a: &Tensor, b: &Tensor) -> f64 {
    let num: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    let den: f64 = b.data().iter().map(|&y| (y as f64).powi(2)).sum();
    (num / den.max(1e-300)).sqrt()
}
