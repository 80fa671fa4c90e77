//! Sobel gradient-magnitude saliency and the importance ordering derived
//! from it.
//!
//! The per-position magnitude is
//!
//! ```text
//! M[i, j] = sqrt( (Σ_c (Sx ⋆ X_c)[i, j])² + (Σ_c (Sy ⋆ X_c)[i, j])² )
//! ```
//!
//! with the standard 3×3 Sobel kernels and zero padding at the borders. The
//! channel responses are summed before squaring.

use crate::error::{check_divisible, Error, Result};
use crate::grid::{morton_order, GridShape, Permutation};
use crate::tensor::Tensor;

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// A non-negative `H × W` saliency field.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    shape: GridShape,
    m: Vec<f32>,
}

impl SaliencyMap {
    pub fn new(shape: GridShape, m: Vec<f32>) -> Result<Self> {
        if m.len() != shape.n() {
            return Err(Error::shape(format!(
                "saliency map of {} values for a {}x{} grid",
                m.len(),
                shape.h,
                shape.w
            )));
        }
        if m.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::shape("saliency values must be finite and >= 0"));
        }
        Ok(SaliencyMap { shape, m })
    }

    pub fn uniform(shape: GridShape, value: f32) -> Self {
        SaliencyMap {
            shape,
            m: vec![value; shape.n()],
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.m
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.m[self.shape.index(x, y)]
    }

    /// `side × side` crop with its top-left corner at column `x0`, row `y0`;
    /// positions past the map edge read as zero.
    pub fn window(&self, x0: usize, y0: usize, side: usize) -> SaliencyMap {
        let mut m = vec![0.0; side * side];
        for dy in 0..side {
            for dx in 0..side {
                let (x, y) = (x0 + dx, y0 + dy);
                if x < self.shape.w && y < self.shape.h {
                    m[dy * side + dx] = self.at(x, y);
                }
            }
        }
        SaliencyMap {
            shape: GridShape { h: side, w: side },
            m,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.shape.h, self.shape.w], self.m.clone())
            .expect("saliency map shape is consistent")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = t.dims2()?;
        SaliencyMap::new(GridShape::new(h, w)?, t.data().to_vec())
    }

    pub fn scaled(&self, c: f32) -> Result<Self> {
        SaliencyMap::new(self.shape, self.m.iter().map(|v| v * c).collect())
    }
}

/// Sobel magnitude of an `[H, W, D]` feature map (`[H, W]` is read as `D = 1`).
pub fn sobel_magnitude(x: &Tensor) -> Result<SaliencyMap> {
    let (h, w, d) = match x.shape() {
        &[h, w, d] => (h, w, d),
        &[h, w] => (h, w, 1),
        s => {
            return Err(Error::shape(format!(
                "sobel_magnitude expects [H, W, D] or [H, W], got {s:?}"
            )))
        }
    };
    let data = x.data();
    let mut m = vec![0.0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            let (mut gx, mut gy) = (0.0f64, 0.0f64);
            for (ky, (row_x, row_y)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                let ii = i as isize + ky as isize - 1;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let jj = j as isize + kx as isize - 1;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let base = (ii as usize * w + jj as usize) * d;
                    let s: f64 = data[base..base + d].iter().map(|&v| v as f64).sum();
                    gx += row_x[kx] * s;
                    gy += row_y[kx] * s;
                }
            }
            m[i * w + j] = (gx * gx + gy * gy).sqrt() as f32;
        }
    }
    SaliencyMap::new(GridShape::new(h, w)?, m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Granularity {
    /// Rank individual positions.
    Token,
    /// Rank Morton-contiguous groups by their summed saliency.
    #[default]
    ZGroup,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Granularity::Token),
            "zgroup" => Ok(Granularity::ZGroup),
            other => Err(Error::config(format!(
                "unknown granularity {other:?} (expected token|zgroup)"
            ))),
        }
    }
}

/// How positions are ranked. Ties always fall back to ascending Morton code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrderingConfig {
    pub granularity: Granularity,
    pub group_size: usize,
}

impl Default for OrderingConfig {
    fn default() -> Self {
        OrderingConfig {
            granularity: Granularity::ZGroup,
            group_size: 4,
        }
    }
}

/// Summed saliency of each run of `group_size` consecutive Morton ranks.
pub fn group_energy(m: &SaliencyMap, morton: &Permutation, group_size: usize) -> Result<Tensor> {
    let n = m.shape().n();
    if morton.len() != n {
        return Err(Error::shape(format!(
            "morton order of length {} for {n} tokens",
            morton.len()
        )));
    }
    if group_size == 0 {
        return Err(Error::config("group_size must be positive"));
    }
    check_divisible("token count vs. group size", n, group_size)?;
    let energies = morton
        .forward()
        .chunks(group_size)
        .map(|g| g.iter().map(|&t| m.values()[t]).sum())
        .collect();
    Tensor::from_vec(energies)
}

/// Descending-saliency permutation `π` (rank → row-major token index).
pub fn importance_order(m: &SaliencyMap, cfg: &OrderingConfig) -> Result<Permutation> {
    let morton = morton_order(m.shape());
    let values = m.values();
    match cfg.granularity {
        Granularity::Token => {
            let mut order = morton.forward().to_vec();
            // Stable sort keeps ascending Morton order among equal values.
            order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
            Ok(Permutation::from_forward_unchecked(order))
        }
        Granularity::ZGroup => {
            let energy = group_energy(m, &morton, cfg.group_size)?;
            let mut groups: Vec<usize> = (0..energy.len()).collect();
            let e = energy.data();
            groups.sort_by(|&a, &b| e[b].total_cmp(&e[a]));
            let gs = cfg.group_size;
            let order = groups
                .iter()
                .flat_map(|&g| morton.forward()[g * gs..(g + 1) * gs].iter().copied())
                .collect();
            Ok(Permutation::from_forward_unchecked(order))
        }
    }
}
