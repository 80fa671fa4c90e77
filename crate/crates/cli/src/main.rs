use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use stripesparse::bench::{attn_bench, bench_csv, encoder_bench, AttnBenchConfig};
use stripesparse::encoder::{encoder_forward, encoder_forward_traced, EncoderConfig, EncoderWeights, Mode};
use stripesparse::mlp::{
    kmeans_replace, mlp_forward, pearson, relative_perturbation, token_dissimilarity, update_magnitudes,
    KMEANS_DEFAULT_ITERS,
};
use stripesparse::pgm::write_pgm;
use stripesparse::saliency::{sobel_magnitude, Granularity, OrderingConfig, SaliencyMap};
use stripesparse::stripesort::{block_map, scan_order, StripeConfig, StripeVariant};
use stripesparse::tensor::{tensor_read, tensor_write};
use stripesparse::verify::run_suites;

#[derive(Parser)]
#[command(
    name = "stripesparse",
    version,
    about = "Stripe-sort sparse attention toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sobel saliency map of an [H, W, D] or [H, W] tensor.
    Saliency {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Stripe-sort scan order of a saliency map.
    Permute {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        g: usize,
        #[arg(long, default_value = "full")]
        variant: StripeVariant,
        #[arg(long, default_value = "zgroup")]
        granularity: Granularity,
        #[arg(long, default_value_t = 4)]
        group_size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Write the block id of every grid cell as a grayscale image.
        #[arg(long)]
        blocks: Option<PathBuf>,
    },
    /// Run the randomized oracle-equivalence suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        cases: usize,
    },
    /// Time the A-shape kernel across densities.
    AttnBench {
        #[arg(long, default_value_t = 4096)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1.0")]
        densities: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 128)]
        tile: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Time the sparse encoder against dense mode across densities.
    EncodeBench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1.0")]
        densities: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the toy encoder on an [H, W, d] tensor.
    Encode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "sparse")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Per-block correlation between token dissimilarity and MLP update size.
    MlpStats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "sparse")]
        mode: Mode,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Replace tokens by k-means centroids and measure the perturbation.
    ProbeCluster {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = KMEANS_DEFAULT_ITERS)]
        iters: usize,
        #[arg(long)]
        csv: PathBuf,
    },
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn saliency(input: &Path, out: &Path, pgm: Option<&Path>) -> Result<()> {
    let x = tensor_read(input)?;
    let m = sobel_magnitude(&x)?;
    tensor_write(&m.to_tensor(), out)?;
    if let Some(p) = pgm {
        let s = m.shape();
        write_pgm(p, m.values(), s.h, s.w)?;
    }
    println!("saliency {}x{} -> {}", m.shape().h, m.shape().w, out.display());
    Ok(())
}

fn permute(
    input: &Path,
    stripe: StripeConfig,
    ordering: OrderingConfig,
    out: &Path,
    blocks: Option<&Path>,
) -> Result<()> {
    let m = SaliencyMap::from_tensor(&tensor_read(input)?)?;
    let sigma = scan_order(&m, &ordering, &stripe)?;
    tensor_write(&sigma.to_tensor()?, out)?;
    if let Some(p) = blocks {
        // block_map is indexed by grid cell, so it is already in row-major order.
        let ids: Vec<f32> = block_map(&sigma, stripe.g)?
            .into_iter()
            .map(|b| b as f32)
            .collect();
        let s = m.shape();
        write_pgm(p, &ids, s.h, s.w)?;
    }
    println!(
        "permutation of {} tokens, g = {} -> {}",
        sigma.len(),
        stripe.g,
        out.display()
    );
    Ok(())
}

fn verify(seed: u64, cases: usize) -> Result<()> {
    println!("seed {seed}, {cases} cases per suite");
    let results = run_suites(seed, cases)?;
    println!(
        "{:<34} {:>6} {:>9} {:>11}  result",
        "suite", "cases", "failures", "worst err"
    );
    for r in &results {
        println!(
            "{:<34} {:>6} {:>9} {:>11.3e}  {}",
            r.name,
            r.cases,
            r.failures,
            r.worst,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        bail!("{failed} suite(s) failed");
    }
    println!("all suites passed");
    Ok(())
}

fn emit_csv(csv: &str, path: Option<&Path>) -> Result<()> {
    print!("{csv}");
    if let Some(p) = path {
        write_text(p, csv)?;
    }
    Ok(())
}

fn encode(config: &Path, input: &Path, mode: Mode, out: &Path, report: Option<&Path>) -> Result<()> {
    let cfg = EncoderConfig::load(config)?;
    println!("seed {}", cfg.seed);
    let x = tensor_read(input)?;
    let w = EncoderWeights::random(&cfg);
    let res = encoder_forward(&x, &w, &cfg, mode)?;
    tensor_write(&res.y, out)?;
    if let Some(p) = report {
        write_text(p, &res.report.to_csv())?;
    }
    println!(
        "attention density {:.4}, {:.1} ms -> {}",
        res.report.attn_density(),
        res.report.wall_ms(),
        out.display()
    );
    Ok(())
}

fn mean_of(u: &[f32], idx: impl Iterator<Item = usize>) -> Option<f64> {
    let (s, c) = idx.fold((0.0, 0usize), |(s, c), i| (s + u[i] as f64, c + 1));
    (c > 0).then(|| s / c as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn mlp_stats(config: &Path, input: &Path, mode: Mode, csv: &Path) -> Result<()> {
    let cfg = EncoderConfig::load(config)?;
    println!("seed {}", cfg.seed);
    let x = tensor_read(input)?;
    let w = EncoderWeights::random(&cfg);
    let (_, trace) = encoder_forward_traced(&x, &w, &cfg, mode)?;
    let mut out = String::from("layer,K,rho,mean_u_keep,mean_u_bypass\n");
    for (layer, (t, bw)) in trace.iter().zip(&w.blocks).enumerate() {
        let delta = mlp_forward(&t.mlp_input, &bw.mlp)?.delta;
        let u = update_magnitudes(&delta);
        let diss = token_dissimilarity(&t.mlp_input);
        // Constant inputs leave the correlation undefined; the field stays empty.
        let rho = pearson(&diss, &u).ok();
        let mut kept = vec![false; u.len()];
        t.keep.iter().for_each(|&i| kept[i] = true);
        let keep_mean = mean_of(u.data(), t.keep.iter().copied());
        let bypass_mean = mean_of(u.data(), (0..u.len()).filter(|&i| !kept[i]));
        out.push_str(&format!(
            "{layer},{},{},{},{}\n",
            t.keep.len(),
            fmt_opt(rho),
            fmt_opt(keep_mean),
            fmt_opt(bypass_mean)
        ));
    }
    print!("{out}");
    write_text(csv, &out)
}

fn probe_cluster(input: &Path, ks: &[usize], seed: u64, iters: usize, csv: &Path) -> Result<()> {
    let t = tensor_read(input)?;
    let d = *t.shape().last().context("scalar tensor has no token rows")?;
    let rows = t.len() / d.max(1);
    let x = t.reshape(&[rows, d])?;
    println!("seed {seed}, {} tokens of width {d}", x.rows());
    let mut out = String::from("k,distortion,relative_perturbation\n");
    for &k in ks {
        let res = kmeans_replace(&x, k, seed, iters)?;
        out.push_str(&format!(
            "{k},{},{}\n",
            res.distortion,
            relative_perturbation(&res.replaced, &x)
        ));
    }
    print!("{out}");
    write_text(csv, &out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Saliency { input, out, pgm } => saliency(&input, &out, pgm.as_deref()),
        Command::Permute {
            input,
            g,
            variant,
            granularity,
            group_size,
            out,
            blocks,
        } => permute(
            &input,
            StripeConfig { g, variant },
            OrderingConfig {
                granularity,
                group_size,
            },
            &out,
            blocks.as_deref(),
        ),
        Command::Verify { seed, cases } => verify(seed, cases),
        Command::AttnBench {
            n,
            d,
            densities,
            repeats,
            tile,
            seed,
            csv,
        } => {
            println!("seed {seed}");
            let rows = attn_bench(&AttnBenchConfig {
                n,
                d,
                densities,
                repeats,
                tile,
                seed,
            })?;
            emit_csv(&bench_csv(&rows), csv.as_deref())
        }
        Command::EncodeBench {
            config,
            densities,
            repeats,
            csv,
        } => {
            let cfg = match config {
                Some(p) => EncoderConfig::load(p)?,
                None => EncoderConfig::default(),
            };
            println!("seed {}", cfg.seed);
            let rows = encoder_bench(&cfg, &densities, repeats)?;
            emit_csv(&bench_csv(&rows), csv.as_deref())
        }
        Command::Encode {
            config,
            input,
            mode,
            out,
            report,
        } => encode(&config, &input, mode, &out, report.as_deref()),
        Command::MlpStats {
            config,
            input,
            mode,
            csv,
        } => mlp_stats(&config, &input, mode, &csv),
        Command::ProbeCluster {
            input,
            k,
            seed,
            iters,
            csv,
        } => probe_cluster(&input, &k, seed, iters, &csv),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
