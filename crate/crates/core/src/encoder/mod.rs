//! Toy ViT encoder with SAM's local/global block layout.
//!
//! Each block is `x += proj(attn(LN(x)))` followed by the MLP block. Local
//! blocks attend within `window × window` tiles of the grid, zero-padding the
//! ragged border windows and cropping afterwards; global blocks attend over
//! the whole grid. The attention logits carry SAM's decomposed relative
//! position bias, computed per head from the queries and the block's
//! `rel_pos_h` / `rel_pos_w` tables.
//!
//! In sparse mode the saliency map and scan orders are derived once from the
//! encoder input: one `σ` per window (shared by every local block) and one for
//! the full grid (shared by every global block). Attention runs in `σ` order
//! through the A-shape kernel and the MLP is routed over a `σ`-ranked prefix.
//! Dense mode runs the reference attention in spatial order and the full MLP.

mod config;

pub use config::{BlockKind, EncoderConfig};

use std::time::Instant;

use rayon::prelude::*;

use crate::attention::{
    ashape_attention, build_active_set, dense_attention_ref, tile_count, AShapeConfig, BiasTables,
};
use crate::error::{Error, Result};
use crate::grid::{GridShape, Permutation};
use crate::mlp::{mlp_forward, route_mlp, MlpWeights, RouterConfig};
use crate::saliency::{sobel_magnitude, SaliencyMap};
use crate::stripesort::scan_order;
use crate::tensor::{add_row_bias, layernorm, matmul, Rng, Tensor, LAYERNORM_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    /// `[d, 3d]`, columns ordered q | k | v, heads contiguous within each.
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    /// `[d, d]`
    pub w_proj: Tensor,
    pub b_proj: Tensor,
    /// `[2s − 1, head_dim]` for an attention region of side `s`.
    pub rel_pos_h: Tensor,
    pub rel_pos_w: Tensor,
    pub mlp: MlpWeights,
}

impl BlockWeights {
    fn random(cfg: &EncoderConfig, kind: BlockKind, rng: &mut Rng) -> Self {
        let (d, hd) = (cfg.d, cfg.head_dim());
        let side = cfg.attention_side(kind);
        let std = 1.0 / (d as f32).sqrt();
        BlockWeights {
            ln1_gamma: Tensor::full(&[d], 1.0),
            ln1_beta: Tensor::zeros(&[d]),
            w_qkv: Tensor::randn(&[d, 3 * d], std, rng),
            b_qkv: Tensor::randn(&[3 * d], 0.02, rng),
            w_proj: Tensor::randn(&[d, d], std, rng),
            b_proj: Tensor::randn(&[d], 0.02, rng),
            rel_pos_h: Tensor::randn(&[2 * side - 1, hd], 0.1, rng),
            rel_pos_w: Tensor::randn(&[2 * side - 1, hd], 0.1, rng),
            mlp: MlpWeights::random(d, cfg.hidden(), rng),
        }
    }

    fn zeros(cfg: &EncoderConfig, kind: BlockKind) -> Self {
        let (d, hd) = (cfg.d, cfg.head_dim());
        let side = cfg.attention_side(kind);
        BlockWeights {
            ln1_gamma: Tensor::zeros(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            w_qkv: Tensor::zeros(&[d, 3 * d]),
            b_qkv: Tensor::zeros(&[3 * d]),
            w_proj: Tensor::zeros(&[d, d]),
            b_proj: Tensor::zeros(&[d]),
            rel_pos_h: Tensor::zeros(&[2 * side - 1, hd]),
            rel_pos_w: Tensor::zeros(&[2 * side - 1, hd]),
            mlp: MlpWeights::zeros(d, cfg.hidden()),
        }
    }

    fn check(&self, cfg: &EncoderConfig, kind: BlockKind) -> Result<()> {
        let want = BlockWeights::zeros(cfg, kind);
        let pairs = [
            (&self.ln1_gamma, &want.ln1_gamma),
            (&self.ln1_beta, &want.ln1_beta),
            (&self.w_qkv, &want.w_qkv),
            (&self.b_qkv, &want.b_qkv),
            (&self.w_proj, &want.w_proj),
            (&self.b_proj, &want.b_proj),
            (&self.rel_pos_h, &want.rel_pos_h),
            (&self.rel_pos_w, &want.rel_pos_w),
            (&self.mlp.w1, &want.mlp.w1),
            (&self.mlp.w2, &want.mlp.w2),
        ];
        for (got, want) in pairs {
            if got.shape() != want.shape() {
                return Err(Error::shape(format!(
                    "block weight of shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub blocks: Vec<BlockWeights>,
}

impl EncoderWeights {
    /// Seeded random stand-in weights, one independent stream per block.
    pub fn random(cfg: &EncoderConfig) -> Self {
        let blocks = cfg
            .layout
            .iter()
            .enumerate()
            .map(|(b, &kind)| BlockWeights::random(cfg, kind, &mut Rng::with_stream(cfg.seed, b as u64)))
            .collect();
        EncoderWeights { blocks }
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        EncoderWeights {
            blocks: cfg.layout.iter().map(|&k| BlockWeights::zeros(cfg, k)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Dense,
    Sparse,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Mode::Dense),
            "sparse" => Ok(Mode::Sparse),
            other => Err(Error::config(format!(
                "unknown mode {other:?} (expected dense|sparse)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCost {
    pub block: usize,
    pub kind: BlockKind,
    /// Query-tile × key-tile pairs evaluated, summed over regions and heads.
    pub attn_tiles: u64,
    pub attn_tiles_total: u64,
    pub mlp_rows: u64,
    pub mlp_rows_total: u64,
    pub mlp_macs: u64,
    pub wall_ms: f64,
}

impl BlockCost {
    pub fn attn_density(&self) -> f64 {
        self.attn_tiles as f64 / self.attn_tiles_total as f64
    }

    pub fn mlp_density(&self) -> f64 {
        self.mlp_rows as f64 / self.mlp_rows_total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CostReport {
    pub blocks: Vec<BlockCost>,
}

impl CostReport {
    pub const CSV_HEADER: &'static str =
        "block,kind,attn_tiles,attn_tiles_total,attn_density,mlp_rows,mlp_rows_total,mlp_density,wall_ms";

    /// Attention tile density pooled over all blocks.
    pub fn attn_density(&self) -> f64 {
        let (p, t) = self
            .blocks
            .iter()
            .fold((0, 0), |(p, t), b| (p + b.attn_tiles, t + b.attn_tiles_total));
        p as f64 / t as f64
    }

    pub fn wall_ms(&self) -> f64 {
        self.blocks.iter().map(|b| b.wall_ms).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for b in &self.blocks {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{:.3}\n",
                b.block,
                b.kind.as_str(),
                b.attn_tiles,
                b.attn_tiles_total,
                b.attn_density(),
                b.mlp_rows,
                b.mlp_rows_total,
                b.mlp_density(),
                b.wall_ms
            ));
        }
        s
    }
}

/// Per-block snapshot for MLP statistics.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    /// Tokens entering the MLP block, `[N, d]` in row-major spatial order.
    pub mlp_input: Tensor,
    /// The block's keep-set (row-major token indices) under its scan order.
    pub keep: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[H, W, d]`, original spatial order.
    pub y: Tensor,
    pub report: CostReport,
}

/// A square attention region: a window (local) or the whole grid (global).
/// `tokens[p]` is the row-major grid index at region position `p`, or `None`
/// for zero padding.
struct Region {
    side: usize,
    tokens: Vec<Option<usize>>,
}

fn windows(grid: GridShape, window: usize) -> Vec<Region> {
    let (wy, wx) = (grid.h.div_ceil(window), grid.w.div_ceil(window));
    let mut out = Vec::with_capacity(wy * wx);
    for by in 0..wy {
        for bx in 0..wx {
            let tokens = (0..window * window)
                .map(|p| {
                    let (x, y) = (bx * window + p % window, by * window + p / window);
                    (x < grid.w && y < grid.h).then(|| grid.index(x, y))
                })
                .collect();
            out.push(Region { side: window, tokens });
        }
    }
    out
}

/// Everything derived once from the encoder input.
struct ScanPlan {
    local: Vec<Region>,
    global: Region,
    /// Per-window scan order (sparse) or identity (dense), over window positions.
    local_sigma: Vec<Permutation>,
    global_sigma: Permutation,
    /// Ranking of real grid tokens used to pick MLP keep-sets in local blocks.
    local_mlp_order: Permutation,
}

impl ScanPlan {
    fn build(x: &Tensor, cfg: &EncoderConfig, mode: Mode) -> Result<Self> {
        let grid = cfg.grid;
        let local = windows(grid, cfg.window);
        let global = Region {
            side: grid.h,
            tokens: (0..grid.n()).map(Some).collect(),
        };
        let has = |k| cfg.layout.contains(&k);
        let saliency = match mode {
            Mode::Sparse => Some(sobel_magnitude(x)?),
            Mode::Dense => None,
        };
        let sigma_for = |region: &Region, m: &Option<SaliencyMap>, x0: usize, y0: usize| match m {
            Some(m) => scan_order(&m.window(x0, y0, region.side), &cfg.ordering, &cfg.stripe),
            None => Ok(Permutation::identity(region.tokens.len())),
        };
        let per_row = grid.w.div_ceil(cfg.window);
        let local_sigma = if has(BlockKind::Local) {
            local
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    sigma_for(
                        r,
                        &saliency,
                        (i % per_row) * cfg.window,
                        (i / per_row) * cfg.window,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let global_sigma = if has(BlockKind::Global) {
            sigma_for(&global, &saliency, 0, 0)?
        } else {
            Permutation::identity(grid.n())
        };
        let local_mlp_order = if has(BlockKind::Local) {
            window_interleaved_order(&local, &local_sigma)
        } else {
            Permutation::identity(grid.n())
        };
        Ok(ScanPlan {
            local,
            global,
            local_sigma,
            global_sigma,
            local_mlp_order,
        })
    }
}

/// Ranks every real grid token by its relative rank `r / n` inside its own
/// window's scan order (padding skipped), ties by window index. A prefix of
/// `K` tokens then takes about `K / N` of each window's leading tokens.
fn window_interleaved_order(regions: &[Region], sigmas: &[Permutation]) -> Permutation {
    let mut keyed: Vec<(usize, usize, usize, usize)> = Vec::new();
    for (w, (region, sigma)) in regions.iter().zip(sigmas).enumerate() {
        let real: Vec<usize> = sigma.forward().iter().filter_map(|&p| region.tokens[p]).collect();
        let n = real.len();
        keyed.extend(real.into_iter().enumerate().map(|(r, t)| (r, n, w, t)));
    }
    keyed.sort_by(|a, b| (a.0 * b.1).cmp(&(b.0 * a.1)).then(a.2.cmp(&b.2)));
    Permutation::from_forward_unchecked(keyed.into_iter().map(|k| k.3).collect())
}

/// Decomposed relative-position bias of one head over a square region:
/// `bh[q, kr] = q · Rh[qr − kr + s − 1]`, `bw[q, kc] = q · Rw[qc − kc + s − 1]`.
fn rel_pos_bias(q: &Tensor, side: usize, rel_h: &Tensor, rel_w: &Tensor) -> Result<BiasTables> {
    let s = side * side;
    let mut bh = Tensor::zeros(&[s, side]);
    let mut bw = Tensor::zeros(&[s, side]);
    for p in 0..s {
        let (qr, qc) = (p / side, p % side);
        let qv = q.row(p);
        for k in 0..side {
            bh.row_mut(p)[k] = crate::attention::dot(qv, rel_h.row(qr + side - 1 - k));
            bw.row_mut(p)[k] = crate::attention::dot(qv, rel_w.row(qc + side - 1 - k));
        }
    }
    BiasTables::new(bh, bw)
}

struct RegionResult {
    out: Tensor,
    tiles: u64,
    tiles_total: u64,
}

#[allow(clippy::too_many_arguments)]
fn attend_region(
    region: &Region,
    sigma: &Permutation,
    qkv: &Tensor,
    pad_row: &[f32],
    w: &BlockWeights,
    cfg: &EncoderConfig,
    mode: Mode,
    tile: usize,
    r: f64,
) -> Result<RegionResult> {
    let (d, hd, heads) = (cfg.d, cfg.head_dim(), cfg.heads);
    let s = region.tokens.len();
    let row_of = |p: usize| match region.tokens[p] {
        Some(t) => qkv.row(t),
        None => pad_row,
    };
    let slice = |order: &mut dyn Iterator<Item = usize>, off: usize| {
        let mut data = Vec::with_capacity(s * hd);
        for p in order {
            data.extend_from_slice(&row_of(p)[off..off + hd]);
        }
        Tensor::new(vec![s, hd], data)
    };
    let t = tile_count(s, tile) as u64;
    let tiles_per_head = match mode {
        Mode::Sparse => build_active_set(t as usize, t as usize, r).pairs() as u64,
        Mode::Dense => t * t,
    };
    let mut out = Tensor::zeros(&[s, d]);
    for h in 0..heads {
        let q_spatial = slice(&mut (0..s), h * hd)?;
        let bias = rel_pos_bias(&q_spatial, region.side, &w.rel_pos_h, &w.rel_pos_w)?;
        let fwd = sigma.forward();
        let q = slice(&mut fwd.iter().copied(), h * hd)?;
        let k = slice(&mut fwd.iter().copied(), d + h * hd)?;
        let v = slice(&mut fwd.iter().copied(), 2 * d + h * hd)?;
        let tau = 1.0 / (hd as f32).sqrt();
        let o = match mode {
            Mode::Dense => dense_attention_ref(&q, &k, &v, &bias, sigma, sigma, tau)?,
            Mode::Sparse => {
                let acfg = AShapeConfig::new(tile, tile, r, tau)?;
                ashape_attention(&q, &k, &v, &bias, sigma, sigma, &acfg)?
            }
        };
        for (i, &p) in fwd.iter().enumerate() {
            out.row_mut(p)[h * hd..(h + 1) * hd].copy_from_slice(o.row(i));
        }
    }
    Ok(RegionResult {
        out,
        tiles: tiles_per_head * heads as u64,
        tiles_total: t * t * heads as u64,
    })
}

fn run_block(
    x: &Tensor,
    w: &BlockWeights,
    cfg: &EncoderConfig,
    plan: &ScanPlan,
    b: usize,
    mode: Mode,
    trace: Option<&mut Vec<BlockTrace>>,
) -> Result<(Tensor, BlockCost)> {
    let start = Instant::now();
    let kind = cfg.layout[b];
    let (n, d) = (cfg.grid.n(), cfg.d);
    let normed = layernorm(x, &w.ln1_gamma, &w.ln1_beta, LAYERNORM_EPS)?;
    let qkv = add_row_bias(&matmul(&normed, &w.w_qkv)?, &w.b_qkv)?;
    // Zero-padded tokens project to the bias alone.
    let pad_row = w.b_qkv.data().to_vec();

    let (regions, sigmas, tile): (Vec<&Region>, Vec<&Permutation>, usize) = match kind {
        BlockKind::Local => (
            plan.local.iter().collect(),
            plan.local_sigma.iter().collect(),
            cfg.local_tile,
        ),
        BlockKind::Global => (vec![&plan.global], vec![&plan.global_sigma], cfg.global_tile),
    };
    let r = match mode {
        Mode::Sparse => cfg.density[b],
        Mode::Dense => 1.0,
    };
    let results = regions
        .par_iter()
        .zip(sigmas.par_iter())
        .map(|(region, sigma)| attend_region(region, sigma, &qkv, &pad_row, w, cfg, mode, tile, r))
        .collect::<Result<Vec<_>>>()?;

    let mut attn = Tensor::zeros(&[n, d]);
    let (mut tiles, mut tiles_total) = (0, 0);
    for (region, res) in regions.iter().zip(&results) {
        tiles += res.tiles;
        tiles_total += res.tiles_total;
        for (p, tok) in region.tokens.iter().enumerate() {
            if let Some(t) = tok {
                attn.row_mut(*t).copy_from_slice(res.out.row(p));
            }
        }
    }
    let x1 = x.add(&add_row_bias(&matmul(&attn, &w.w_proj)?, &w.b_proj)?)?;

    let mlp_order = match kind {
        BlockKind::Local => &plan.local_mlp_order,
        BlockKind::Global => &plan.global_sigma,
    };
    let router = RouterConfig::new(cfg.keep_fraction[b], cfg.bypass)?;
    if let Some(trace) = trace {
        trace.push(BlockTrace {
            mlp_input: x1.clone(),
            keep: mlp_order.forward()[..router.keep_count(n)].to_vec(),
        });
    }
    let (y, work) = match mode {
        Mode::Dense => {
            let out = mlp_forward(&x1, &w.mlp)?;
            (out.y, out.work)
        }
        Mode::Sparse => {
            let out = route_mlp(&x1, &w.mlp, mlp_order, &router)?;
            (out.out, out.work)
        }
    };
    let cost = BlockCost {
        block: b,
        kind,
        attn_tiles: tiles,
        attn_tiles_total: tiles_total,
        mlp_rows: work.rows,
        mlp_rows_total: n as u64,
        mlp_macs: work.macs,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((y, cost))
}

fn forward_impl(
    x: &Tensor,
    w: &EncoderWeights,
    cfg: &EncoderConfig,
    mode: Mode,
    mut trace: Option<&mut Vec<BlockTrace>>,
) -> Result<EncoderOutput> {
    cfg.validate()?;
    let want = [cfg.grid.h, cfg.grid.w, cfg.d];
    if x.shape() != want {
        return Err(Error::shape(format!(
            "encoder input {:?}, config expects {want:?}",
            x.shape()
        )));
    }
    if w.blocks.len() != cfg.blocks() {
        return Err(Error::shape(format!(
            "{} weight blocks for a {}-block layout",
            w.blocks.len(),
            cfg.blocks()
        )));
    }
    for (bw, &kind) in w.blocks.iter().zip(&cfg.layout) {
        bw.check(cfg, kind)?;
    }
    let plan = ScanPlan::build(x, cfg, mode)?;
    let mut tokens = x.clone().reshape(&[cfg.grid.n(), cfg.d])?;
    let mut report = CostReport::default();
    for (b, bw) in w.blocks.iter().enumerate() {
        let (next, cost) = run_block(&tokens, bw, cfg, &plan, b, mode, trace.as_deref_mut())?;
        tokens = next;
        report.blocks.push(cost);
    }
    Ok(EncoderOutput {
        y: tokens.reshape(&want)?,
        report,
    })
}

/// Runs the encoder on `x: [H, W, d]`.
pub fn encoder_forward(
    x: &Tensor,
    w: &EncoderWeights,
    cfg: &EncoderConfig,
    mode: Mode,
) -> Result<EncoderOutput> {
    forward_impl(x, w, cfg, mode, None)
}

/// [`encoder_forward`] that also records each block's MLP input and keep-set.
pub fn encoder_forward_traced(
    x: &Tensor,
    w: &EncoderWeights,
    cfg: &EncoderConfig,
    mode: Mode,
) -> Result<(EncoderOutput, Vec<BlockTrace>)> {
    let mut trace = Vec::new();
    let out = forward_impl(x, w, cfg, mode, Some(&mut trace))?;
    Ok((out, trace))
}
