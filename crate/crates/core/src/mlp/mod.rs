//! Transformer MLP block and the residual-consistency router.
//!
//! The dense block computes `Δ = W2·gelu(W1·LN(x) + b1) + b2` and `y = x + Δ`
//! for every token. The router runs the same per-row pipeline on a keep-set
//! (the first `K` ranks of the scan order) and lets the rest bypass it.

mod kmeans;
mod stats;

pub use kmeans::{kmeans_replace, relative_perturbation, KmeansResult, KMEANS_DEFAULT_ITERS};
pub use stats::{pearson, token_dissimilarity, update_magnitudes};

use crate::error::{Error, Result};
use crate::grid::Permutation;
use crate::tensor::{add_row_bias, gelu, layernorm, matmul, Rng, Tensor, LAYERNORM_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    /// `[d, h]`
    pub w1: Tensor,
    /// `[h]`
    pub b1: Tensor,
    /// `[h, d]`
    pub w2: Tensor,
    /// `[d]`
    pub b2: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

impl MlpWeights {
    pub fn new(
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
        ln_gamma: Tensor,
        ln_beta: Tensor,
    ) -> Result<Self> {
        let (d, h) = w1.dims2()?;
        let (h2, d2) = w2.dims2()?;
        if h2 != h || d2 != d {
            return Err(Error::shape(format!(
                "mlp weights: w1 [{d}, {h}] vs w2 [{h2}, {d2}]"
            )));
        }
        for (name, t, want) in [
            ("b1", &b1, h),
            ("b2", &b2, d),
            ("ln_gamma", &ln_gamma, d),
            ("ln_beta", &ln_beta, d),
        ] {
            if t.len() != want {
                return Err(Error::shape(format!(
                    "mlp weights: {name} has {} values, expected {want}",
                    t.len()
                )));
            }
        }
        Ok(MlpWeights {
            w1,
            b1,
            w2,
            b2,
            ln_gamma,
            ln_beta,
        })
    }

    /// All parameters zero, including the LayerNorm gain: `Δ ≡ 0`.
    pub fn zeros(d: usize, h: usize) -> Self {
        MlpWeights {
            w1: Tensor::zeros(&[d, h]),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::zeros(&[h, d]),
            b2: Tensor::zeros(&[d]),
            ln_gamma: Tensor::zeros(&[d]),
            ln_beta: Tensor::zeros(&[d]),
        }
    }

    /// Fan-in scaled Gaussian weights, unit LayerNorm gain, small biases.
    pub fn random(d: usize, h: usize, rng: &mut Rng) -> Self {
        MlpWeights {
            w1: Tensor::randn(&[d, h], 1.0 / (d as f32).sqrt(), rng),
            b1: Tensor::randn(&[h], 0.02, rng),
            w2: Tensor::randn(&[h, d], 1.0 / (h as f32).sqrt(), rng),
            b2: Tensor::randn(&[d], 0.02, rng),
            ln_gamma: Tensor::full(&[d], 1.0),
            ln_beta: Tensor::zeros(&[d]),
        }
    }

    pub fn d(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }
}

/// Work done by an MLP call, counted at the matmuls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MlpWork {
    /// Token rows pushed through the MLP.
    pub rows: u64,
    /// Multiply-adds issued by the two projections.
    pub macs: u64,
}

impl std::ops::AddAssign for MlpWork {
    fn add_assign(&mut self, rhs: Self) {
        self.rows += rhs.rows;
        self.macs += rhs.macs;
    }
}

fn counted_matmul(a: &Tensor, b: &Tensor, work: &mut MlpWork) -> Result<Tensor> {
    let out = matmul(a, b)?;
    work.macs += (a.shape()[0] * a.shape()[1] * b.shape()[1]) as u64;
    Ok(out)
}

/// `MLP(LN(x))` for every row of `x: [n, d]`.
fn mlp_delta(x: &Tensor, w: &MlpWeights) -> Result<(Tensor, MlpWork)> {
    let (n, d) = x.dims2()?;
    if d != w.d() {
        return Err(Error::shape(format!(
            "tokens of width {d} into an MLP of width {}",
            w.d()
        )));
    }
    let mut work = MlpWork {
        rows: n as u64,
        macs: 0,
    };
    let normed = layernorm(x, &w.ln_gamma, &w.ln_beta, LAYERNORM_EPS)?;
    let hidden = gelu(&add_row_bias(&counted_matmul(&normed, &w.w1, &mut work)?, &w.b1)?);
    let delta = add_row_bias(&counted_matmul(&hidden, &w.w2, &mut work)?, &w.b2)?;
    Ok((delta, work))
}

#[derive(Debug, Clone)]
pub struct MlpOutput {
    pub y: Tensor,
    pub delta: Tensor,
    pub work: MlpWork,
}

/// Dense MLP block: `delta = MLP(LN(x))`, `y = x + delta`.
pub fn mlp_forward(x: &Tensor, w: &MlpWeights) -> Result<MlpOutput> {
    let (delta, work) = mlp_delta(x, w)?;
    let y = x.add(&delta)?;
    Ok(MlpOutput { y, delta, work })
}

/// What bypassing tokens receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BypassMode {
    /// `y_i = x_i`.
    #[default]
    Identity,
    /// `y_i = LN(x_i)` with the block's LayerNorm parameters.
    LayerNorm,
}

impl std::str::FromStr for BypassMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(BypassMode::Identity),
            "layernorm" => Ok(BypassMode::LayerNorm),
            other => Err(Error::config(format!(
                "unknown bypass mode {other:?} (expected identity|layernorm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouterConfig {
    /// Fraction of tokens routed through the MLP, in `(0, 1]`.
    pub keep_fraction: f64,
    pub bypass: BypassMode,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            keep_fraction: 1.0,
            bypass: BypassMode::Identity,
        }
    }
}

impl RouterConfig {
    pub fn new(keep_fraction: f64, bypass: BypassMode) -> Result<Self> {
        let cfg = RouterConfig {
            keep_fraction,
            bypass,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::config(format!(
                "keep_fraction {} outside (0, 1]",
                self.keep_fraction
            )));
        }
        Ok(())
    }

    /// `K = round(keep_fraction · n)`, clamped to `[1, n]`.
    pub fn keep_count(&self, n: usize) -> usize {
        ((self.keep_fraction * n as f64).round() as usize).clamp(1, n.max(1))
    }
}

#[derive(Debug, Clone)]
pub struct RoutedMlp {
    pub out: Tensor,
    /// Row-major indices of the tokens that went through the MLP.
    pub keep: Vec<usize>,
    pub work: MlpWork,
}

/// Residual-consistency MLP: the first `K` tokens of `sigma` get
/// `x_i + MLP(LN(x_i))`, the others bypass according to `cfg.bypass`.
///
/// Kept rows go through exactly the per-row arithmetic of [`mlp_forward`],
/// so they match the dense output bit for bit.
pub fn route_mlp(x: &Tensor, w: &MlpWeights, sigma: &Permutation, cfg: &RouterConfig) -> Result<RoutedMlp> {
    cfg.validate()?;
    let (n, d) = x.dims2()?;
    if sigma.len() != n {
        return Err(Error::shape(format!(
            "scan order of length {} for {n} tokens",
            sigma.len()
        )));
    }
    let k = cfg.keep_count(n);
    let keep = sigma.forward()[..k].to_vec();
    let (delta, work) = mlp_delta(&x.gather_rows(&keep)?, w)?;

    let mut out = match cfg.bypass {
        BypassMode::Identity => x.clone(),
        BypassMode::LayerNorm => layernorm(x, &w.ln_gamma, &w.ln_beta, LAYERNORM_EPS)?,
    };
    for (r, &t) in keep.iter().enumerate() {
        let dst = &mut out.data_mut()[t * d..(t + 1) * d];
        for ((o, &xv), &dv) in dst.iter_mut().zip(x.row(t)).zip(delta.row(r)) {
            *o = xv + dv;
        }
    }
    Ok(RoutedMlp {
        out: out.ensure_finite("route_mlp")?,
        keep,
        work,
    })
}
