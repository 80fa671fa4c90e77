//! Randomized oracle-equivalence suites behind `stripesparse verify`.

use crate::attention::{
    achieved_density, ashape_attention, build_active_set, dense_attention_ref, tile_count, AShapeConfig,
    BiasTables,
};
use crate::encoder::{encoder_forward, EncoderConfig, EncoderWeights, Mode};
use crate::error::Result;
use crate::grid::{apply_permutation, invert, GridShape, Permutation};
use crate::mlp::{mlp_forward, route_mlp, BypassMode, MlpWeights, RouterConfig};
use crate::oracle;
use crate::saliency::{OrderingConfig, SaliencyMap};
use crate::stripesort::{interleave, scan_order, StripeConfig};
use crate::tensor::{matmul, max_rel_err, Rng, Tensor};

/// Tolerance for every floating-point suite.
pub const REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Largest error observed, or 0 for exact suites.
    pub worst: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

struct Tally {
    name: &'static str,
    cases: usize,
    failures: usize,
    worst: f64,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Tally {
            name,
            cases: 0,
            failures: 0,
            worst: 0.0,
        }
    }

    fn check(&mut self, ok: bool) {
        self.cases += 1;
        self.failures += !ok as usize;
    }

    fn within(&mut self, err: f64, tol: f64) {
        self.worst = self.worst.max(err);
        self.check(err <= tol);
    }

    fn done(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            cases: self.cases,
            failures: self.failures,
            worst: self.worst,
        }
    }
}

fn bits_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn matmul_suite(rng: &mut Rng, cases: usize) -> Result<SuiteResult> {
    let mut t = Tally::new("matmul vs naive");
    for _ in 0..cases {
        let (m, k, n) = (
            rng.range_inclusive(1, 40),
            rng.range_inclusive(1, 40),
            rng.range_inclusive(1, 40),
        );
        let a = Tensor::randn(&[m, k], 1.0, rng);
        let b = Tensor::randn(&[k, n], 1.0, rng);
        t.check(bits_eq(
            matmul(&a, &b)?.data(),
            oracle::matmul_naive(&a, &b).data(),
        ));
    }
    Ok(t.done())
}

fn permutation_suite(rng: &mut Rng, cases: usize) -> Result<SuiteResult> {
    let mut t = Tally::new("permutation laws");
    for _ in 0..cases {
        let n = rng.range_inclusive(1, 300);
        let p = Permutation::random(n, rng);
        let x = Tensor::randn(&[n, 3], 1.0, rng);
        let back = apply_permutation(&invert(&p), &apply_permutation(&p, &x)?)?;
        let roundtrip = Permutation::from_tensor(&p.to_tensor()?)?;
        t.check(bits_eq(back.data(), x.data()) && p.compose(&p.invert())?.is_identity() && roundtrip == p);
    }
    Ok(t.done())
}

fn stripe_suite(rng: &mut Rng, cases: usize) -> Result<SuiteResult> {
    let mut t = Tally::new("stripe sort vs reshape oracle");
    for _ in 0..cases {
        let g = [1, 2, 4, 8][rng.below(4)];
        let n = g * rng.range_inclusive(1, 64);
        let pi = Permutation::random(n, rng);
        let sigma = interleave(&pi, g)?;
        t.check(sigma.forward() == oracle::reshape_transpose_flatten(pi.forward(), g));
    }
    Ok(t.done())
}

struct AttnCase {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    bias: BiasTables,
    sq: Permutation,
    sk: Permutation,
    tau: f32,
}

fn attn_case(rng: &mut Rng) -> AttnCase {
    let w = rng.range_inclusive(2, 16);
    let s_q = rng.range_inclusive(1, 256);
    let d = rng.range_inclusive(1, 64);
    let s_k = w * w;
    AttnCase {
        q: Tensor::randn(&[s_q, d], 1.0, rng),
        k: Tensor::randn(&[s_k, d], 1.0, rng),
        v: Tensor::randn(&[s_k, d], 1.0, rng),
        bias: BiasTables::random(s_q, w, 0.5, rng),
        sq: Permutation::random(s_q, rng),
        sk: Permutation::random(s_k, rng),
        tau: 1.0 / (d as f32).sqrt(),
    }
}

fn kernel_dense_suite(rng: &mut Rng, cases: usize) -> Result<SuiteResult> {
    let mut t = Tally::new("a-shape r=1 vs dense");
    for _ in 0..cases {
        let c = attn_case(rng);
        let b = [8, 16, 32, 64][rng.below(4)];
        let cfg = AShapeConfig::new(b, b, 1.0, c.tau)?;
        let got = ashape_attention(&c.q, &c.k, &c.v, &c.bias, &c.sq, &c.sk, &cfg)?;
        let want = dense_attention_ref(&c.q, &c.k, &c.v, &c.bias, &c.sq, &c.sk, c.tau)?;
        t.within(max_rel_err(&got, &want) as f64, REL_TOL);
    }
    Ok(t.done())
}

fn masked_suite(rng: &mut Rng, cases: usize) -> Result<SuiteResult> {
    let mut t = Tally::new("a-shape vs masked oracle");
    for i in 0..cases {
        let c = attn_case(rng);
        let r = [0.0, 0.25, 0.5][i % 3];
        let b = [8, 16, 32][rng.below(3)];
        let cfg = AShapeConfig::new(b, b, r, c.tau)?;
        let got = ashape_attention(&c.q, &c.k, &c.v, &c.bias, &c.sq, &c.sk, &cfg)?;
        let active = build_active_set(tile_count(c.q.rows(), b), tile_count(c.k.rows(), b), r);
        let want = oracle::attention_scalar(&c.q, &c.k, &c.v, &c.bias, &c.sq, &c.sk, c.tau, |row, col| {
            active.tiles(row / b).contains(&(col / b))
        });
        t.within(max_rel_err(&got, &want) as f64, REL_TOL);
    }
    Ok(t.done())
}

fn density_suite(rng: &mut Rng, cases: usize) -> Result<SuiteResult> {
    let mut t = Tally::new("density accounting");
    t.check(achieved_density(8, 8, 0.25) == 0.34375);
    for _ in 0..cases {
        let (tr, tc) = (rng.range_inclusive(1, 40), rng.range_inclusive(1, 40));
        let r = rng.uniform_f64();
        t.check(achieved_density(tr, tc, r) == oracle::density_enumerated(tr, tc, r));
    }
    Ok(t.done())
}

fn routed_mlp_suite(rng: &mut Rng, cases: usize) -> Result<SuiteResult> {
    let mut t = Tally::new("routed mlp exactness");
    for _ in 0..cases {
        let n = rng.range_inclusive(1, 64);
        let d = rng.range_inclusive(1, 16);
        let x = Tensor::randn(&[n, d], 1.0, rng);
        let w = MlpWeights::random(d, 2 * d, rng);
        let sigma = Permutation::random(n, rng);
        let f = rng.uniform_f64();
        let dense = mlp_forward(&x, &w)?;
        let routed = route_mlp(&x, &w, &sigma, &RouterConfig::new(f, BypassMode::Identity)?)?;
        let k = routed.keep.len();
        let rows_ok = routed
            .keep
            .iter()
            .all(|&i| bits_eq(routed.out.row(i), dense.y.row(i)));
        let macs_ok = routed.work.macs * n as u64 == dense.work.macs * k as u64;
        let full = route_mlp(&x, &w, &sigma, &RouterConfig::new(1.0, BypassMode::Identity)?)?;
        t.check(rows_ok && macs_ok && bits_eq(full.out.data(), dense.y.data()));
    }
    Ok(t.done())
}

fn phase_suite() -> Result<SuiteResult> {
    let mut t = Tally::new("stripe blocks are phase offsets");
    for side in [4, 8, 16] {
        let grid = GridShape::square(side)?;
        let sigma = scan_order(
            &SaliencyMap::uniform(grid, 1.0),
            &OrderingConfig::default(),
            &StripeConfig::default(),
        )?;
        let per = grid.n() / 4;
        for (b, block) in sigma.forward().chunks(per).enumerate() {
            // Block b holds exactly the tokens at offset (b % 2, b / 2) of each 2x2 cell.
            let phase = |i: usize| {
                let (x, y) = grid.coords(i);
                (y % 2) * 2 + x % 2
            };
            t.check(block.len() == per && block.iter().all(|&i| phase(i) == b));
        }
    }
    Ok(t.done())
}

fn encoder_suite(rng: &mut Rng, cases: usize) -> Result<SuiteResult> {
    let mut t = Tally::new("encoder sparse(r=1) vs dense");
    for _ in 0..cases {
        let cfg = EncoderConfig {
            grid: GridShape::square(16)?,
            d: 16,
            heads: 2,
            window: [4, 8][rng.below(2)],
            local_tile: 16,
            global_tile: 64,
            seed: rng.next_u64(),
            ..EncoderConfig::default()
        }
        .with_density(1.0)
        .with_keep_fraction(1.0);
        let x = Tensor::randn(&[16, 16, 16], 1.0, rng);
        let w = EncoderWeights::random(&cfg);
        let dense = encoder_forward(&x, &w, &cfg, Mode::Dense)?;
        let sparse = encoder_forward(&x, &w, &cfg, Mode::Sparse)?;
        t.within(max_rel_err(&sparse.y, &dense.y) as f64, REL_TOL);
    }
    Ok(t.done())
}

/// Runs every suite with `cases` random instances each (the encoder suite
/// uses a tenth of that, at least one).
pub fn run_suites(seed: u64, cases: usize) -> Result<Vec<SuiteResult>> {
    let mut rng = Rng::new(seed);
    Ok(vec![
        matmul_suite(&mut rng, cases)?,
        permutation_suite(&mut rng, cases)?,
        stripe_suite(&mut rng, cases)?,
        phase_suite()?,
        density_suite(&mut rng, cases)?,
        kernel_dense_suite(&mut rng, cases)?,
        masked_suite(&mut rng, cases)?,
        routed_mlp_suite(&mut rng, cases)?,
        encoder_suite(&mut rng, cases.div_ceil(10))?,
    ])
}
