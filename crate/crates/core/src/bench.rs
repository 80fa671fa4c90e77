//! Wall-clock density sweeps for the attention kernel and the encoder.

use std::time::Instant;

use crate::attention::{
    achieved_density, ashape_attention, tile_count, AShapeConfig, BiasTables, GLOBAL_TILE,
};
use crate::encoder::{encoder_forward, EncoderConfig, EncoderWeights, Mode};
use crate::error::{Error, Result};
use crate::grid::GridShape;
use crate::saliency::{OrderingConfig, SaliencyMap};
use crate::stripesort::{scan_order, StripeConfig};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub density: f64,
    pub achieved_density: f64,
    pub median_ms: f64,
    /// Baseline median over this row's median. The baseline is the same
    /// path at `r = 1` (and `keep_fraction = 1` for the encoder).
    pub speedup: f64,
}

pub const BENCH_CSV_HEADER: &str = "density,achieved_density,median_ms,speedup";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.4},{:.4}\n",
            r.density, r.achieved_density, r.median_ms, r.speedup
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnBenchConfig {
    /// Sequence length; must be a perfect square so it can carry a 2D bias.
    pub n: usize,
    pub d: usize,
    pub densities: Vec<f64>,
    pub repeats: usize,
    pub tile: usize,
    pub seed: u64,
}

impl Default for AttnBenchConfig {
    fn default() -> Self {
        AttnBenchConfig {
            n: 4096,
            d: 64,
            densities: vec![0.25, 0.5, 1.0],
            repeats: 20,
            tile: GLOBAL_TILE,
            seed: 0,
        }
    }
}

pub fn median(xs: &mut [f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn time_ms(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?; // warm-up
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(&mut times))
}

fn check_densities(densities: &[f64], repeats: usize) -> Result<()> {
    if densities.is_empty() {
        return Err(Error::config("no densities given"));
    }
    if let Some(r) = densities.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::config(format!("density {r} outside [0, 1]")));
    }
    if repeats == 0 {
        return Err(Error::config("repeats must be at least 1"));
    }
    Ok(())
}

/// Times the A-shape kernel on one random head of `n` tokens in stripe-sort
/// order. Rows come back in the order of `cfg.densities`.
pub fn attn_bench(cfg: &AttnBenchConfig) -> Result<Vec<BenchRow>> {
    check_densities(&cfg.densities, cfg.repeats)?;
    let side = (cfg.n as f64).sqrt().round() as usize;
    if side * side != cfg.n || cfg.n == 0 {
        return Err(Error::config(format!("n = {} is not a perfect square", cfg.n)));
    }
    let grid = GridShape::square(side)?;
    let mut rng = Rng::new(cfg.seed);
    let q = Tensor::randn(&[cfg.n, cfg.d], 1.0, &mut rng);
    let k = Tensor::randn(&[cfg.n, cfg.d], 1.0, &mut rng);
    let v = Tensor::randn(&[cfg.n, cfg.d], 1.0, &mut rng);
    let bias = BiasTables::random(cfg.n, side, 0.5, &mut rng);
    let sigma = scan_order(
        &SaliencyMap::uniform(grid, 1.0),
        &OrderingConfig::default(),
        &StripeConfig::default(),
    )?;
    let t = tile_count(cfg.n, cfg.tile);
    let run = |r: f64| -> Result<f64> {
        let acfg = AShapeConfig::square(cfg.tile, r, cfg.d)?;
        time_ms(cfg.repeats, || {
            ashape_attention(&q, &k, &v, &bias, &sigma, &sigma, &acfg).map(drop)
        })
    };
    let base = run(1.0)?;
    cfg.densities
        .iter()
        .map(|&r| {
            let ms = if r == 1.0 { base } else { run(r)? };
            Ok(BenchRow {
                density: r,
                achieved_density: achieved_density(t, t, r),
                median_ms: ms,
                speedup: base / ms,
            })
        })
        .collect()
}

/// Times the sparse encoder with both the attention density and the MLP
/// keep fraction set to each density, against the same path with both at 1.
pub fn encoder_bench(cfg: &EncoderConfig, densities: &[f64], repeats: usize) -> Result<Vec<BenchRow>> {
    check_densities(densities, repeats)?;
    cfg.validate()?;
    let w = EncoderWeights::random(cfg);
    let x = Tensor::randn(
        &[cfg.grid.h, cfg.grid.w, cfg.d],
        1.0,
        &mut Rng::with_stream(cfg.seed, u64::MAX),
    );
    let run = |r: f64| {
        let c = cfg.with_density(r).with_keep_fraction(r);
        time_ms(repeats, || encoder_forward(&x, &w, &c, Mode::Sparse).map(drop))
    };
    let base = run(1.0)?;
    densities
        .iter()
        .map(|&r| {
            let c = cfg.with_density(r).with_keep_fraction(r);
            let achieved = encoder_forward(&x, &w, &c, Mode::Sparse)?.report.attn_density();
            let ms = if r == 1.0 { base } else { run(r)? };
            Ok(BenchRow {
                density: r,
                achieved_density: achieved,
                median_ms: ms,
                speedup: base / ms,
            })
        })
        .collect()
}
