use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use stripesparse::grid::Permutation;
use stripesparse::tensor::{tensor_read, tensor_write};
use stripesparse::{Rng, Tensor};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stripesparse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_input(dir: &Path, name: &str, shape: &[usize], seed: u64) -> String {
    let path = dir.join(name);
    tensor_write(&Tensor::randn(shape, 1.0, &mut Rng::new(seed)), &path).unwrap();
    path.to_str().unwrap().to_owned()
}

const SMALL_CFG: &str = "\
# toy encoder
grid = 16x16
d = 16
heads = 2
window = 8
layout = local,local,global
density = 0.25
keep_fraction = 0.5
local_tile = 16
global_tile = 64
seed = 3
";

#[test]
fn verify_passes() {
    let o = run(&["verify", "--seed", "7", "--cases", "50"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("all suites passed"));
    assert!(stdout(&o).contains("seed 7"));
}

#[test]
fn saliency_then_permute() {
    let dir = tempfile::tempdir().unwrap();
    let x = write_input(dir.path(), "x.sptn", &[8, 8, 3], 1);
    let (m, pgm) = (dir.path().join("m.sptn"), dir.path().join("m.pgm"));
    let o = run(&["saliency", "--in", &x, "--out", p(&m), "--pgm", p(&pgm)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(tensor_read(&m).unwrap().shape(), &[8, 8]);
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5\n8 8\n255\n"));

    let (sigma, blocks) = (dir.path().join("sigma.sptn"), dir.path().join("blocks.pgm"));
    let o = run(&[
        "permute",
        "--in",
        p(&m),
        "--g",
        "4",
        "--variant",
        "full",
        "--out",
        p(&sigma),
        "--blocks",
        p(&blocks),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let perm = Permutation::from_tensor(&tensor_read(&sigma).unwrap()).unwrap();
    assert_eq!(perm.len(), 64);
    let img = fs::read(&blocks).unwrap();
    let pixels = &img[img.len() - 64..];
    for level in [0u8, 85, 170, 255] {
        assert_eq!(pixels.iter().filter(|&&v| v == level).count(), 16);
    }
}

#[test]
fn permute_rejects_indivisible_g() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.sptn");
    tensor_write(&Tensor::full(&[5, 5], 1.0), &m).unwrap();
    let out = dir.path().join("sigma.sptn");
    let o = run(&["permute", "--in", p(&m), "--g", "4", "--out", p(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("not divisible by 4"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn errors_are_distinct_and_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run(&[
        "saliency",
        "--in",
        "/no/such/file.sptn",
        "--out",
        "/tmp/unused.sptn",
    ]);
    assert!(!missing.status.success());
    assert!(stderr(&missing).contains("/no/such/file.sptn"));

    let bad_flag = run(&["verify", "--bogus"]);
    assert!(!bad_flag.status.success());
    assert!(stderr(&bad_flag).contains("--bogus"));

    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "heads = 3\nd = 16\n").unwrap();
    let x = write_input(dir.path(), "x.sptn", &[16, 16, 16], 0);
    let out = dir.path().join("y.sptn");
    let bad_cfg = run(&["encode", "--config", p(&cfg), "--in", &x, "--out", p(&out)]);
    assert!(!bad_cfg.status.success());
    assert!(
        stderr(&bad_cfg).contains("invalid config"),
        "{}",
        stderr(&bad_cfg)
    );

    let not_sptn = dir.path().join("junk.sptn");
    fs::write(&not_sptn, b"JUNKJUNKJUNK").unwrap();
    let bad_magic = run(&["saliency", "--in", p(&not_sptn), "--out", p(&out)]);
    assert!(!bad_magic.status.success());
    assert!(stderr(&bad_magic).contains("magic"));
}

#[test]
fn attn_bench_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let o = run(&[
        "attn-bench",
        "--n",
        "1024",
        "--d",
        "16",
        "--densities",
        "0.25,0.5,1.0",
        "--repeats",
        "1",
        "--csv",
        p(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "density,achieved_density,median_ms,speedup");
    assert_eq!(lines.len(), 4);
    for (line, r) in lines[1..].iter().zip(["0.25", "0.5", "1"]) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 4);
        assert_eq!(fields[0], r);
        fields.iter().for_each(|f| {
            f.parse::<f64>().unwrap();
        });
    }
}

#[test]
fn encode_is_deterministic_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, SMALL_CFG).unwrap();
    let x = write_input(dir.path(), "x.sptn", &[16, 16, 16], 4);
    let mut outputs = Vec::new();
    for i in 0..2 {
        let (y, report) = (
            dir.path().join(format!("y{i}.sptn")),
            dir.path().join(format!("r{i}.csv")),
        );
        let o = run(&[
            "encode",
            "--config",
            p(&cfg),
            "--in",
            &x,
            "--mode",
            "sparse",
            "--out",
            p(&y),
            "--report",
            p(&report),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("seed 3"));
        outputs.push((fs::read(&y).unwrap(), fs::read_to_string(&report).unwrap()));
    }
    assert_eq!(outputs[0].0, outputs[1].0);
    let strip_time = |s: &str| -> Vec<String> {
        s.lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_owned())
            .collect()
    };
    assert_eq!(strip_time(&outputs[0].1), strip_time(&outputs[1].1));
    let report = &outputs[0].1;
    assert!(report.starts_with(
        "block,kind,attn_tiles,attn_tiles_total,attn_density,mlp_rows,mlp_rows_total,mlp_density,wall_ms\n"
    ));
    assert_eq!(report.lines().count(), 4);
    assert!(report.lines().nth(3).unwrap().starts_with("2,global,"));
}

#[test]
fn encode_dense_and_full_sparse_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    fs::write(
        &cfg,
        SMALL_CFG
            .replace("density = 0.25", "density = 1")
            .replace("keep_fraction = 0.5", "keep_fraction = 1"),
    )
    .unwrap();
    let x = write_input(dir.path(), "x.sptn", &[16, 16, 16], 5);
    let mut ys = Vec::new();
    for mode in ["dense", "sparse"] {
        let y = dir.path().join(format!("{mode}.sptn"));
        let o = run(&[
            "encode",
            "--config",
            p(&cfg),
            "--in",
            &x,
            "--mode",
            mode,
            "--out",
            p(&y),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        ys.push(tensor_read(&y).unwrap());
    }
    assert!(stripesparse::tensor::max_rel_err(&ys[1], &ys[0]) <= 1e-4);
}

#[test]
fn mlp_stats_rows_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, SMALL_CFG).unwrap();
    let x = write_input(dir.path(), "x.sptn", &[16, 16, 16], 6);
    let csv = dir.path().join("stats.csv");
    let o = run(&["mlp-stats", "--config", p(&cfg), "--in", &x, "--csv", p(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "layer,K,rho,mean_u_keep,mean_u_bypass");
    assert_eq!(lines.len(), 4);
    for (layer, line) in lines[1..].iter().enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], layer.to_string());
        assert_eq!(f[1], "128");
        let rho: f64 = f[2].parse().unwrap();
        assert!((-1.0..=1.0).contains(&rho));
    }
}

#[test]
fn probe_cluster_rows_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let x = write_input(dir.path(), "tokens.sptn", &[64, 8], 7);
    let csv = dir.path().join("probe.csv");
    let o = run(&["probe-cluster", "--in", &x, "--k", "4,16,64", "--csv", p(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("seed 0"));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "k,distortion,relative_perturbation");
    let dist: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(dist.len(), 3);
    assert!(dist[0] > dist[1]);
    assert_eq!(dist[2], 0.0);

    let again = dir.path().join("again.csv");
    assert!(
        run(&["probe-cluster", "--in", &x, "--k", "4,16,64", "--csv", p(&again)])
            .status
            .success()
    );
    assert_eq!(fs::read(&csv).unwrap(), fs::read(&again).unwrap());
}
