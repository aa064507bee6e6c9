//! End-to-end acceptance checks, one test per criterion. Each writes a
//! `criterion N: PASS|FAIL` line with the measured numbers to stderr before
//! asserting; `--test-threads 1` keeps the lines in order.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use pgd_core::expcli::{
    cmd_bias_table, cmd_check_identities, cmd_rates, cmd_reg_path, cmd_toynet_hist, ExperimentConfig,
    ExperimentKind, Outcome,
};
use pgd_core::linmodel::Loss;
use pgd_core::oracle::{max_margin_direction, DEFAULT_MARGIN_TOL};
use pgd_core::pgd::{run_pgd, MONOTONE_TOLERANCE};
use pgd_core::potential::{inner, Potential, WeightVector};
use pgd_core::synthdata::{gaussian_weights, gen_random_separable, gen_symmetric_pair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

mod common;
use common::brute_force_margin;

fn report(n: u32, pass: bool, detail: impl AsRef<str>) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    // Straight to the handle, so the line shows even when output is captured.
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {}", detail.as_ref());
    assert!(pass, "criterion {n} failed: {}", detail.as_ref());
}

fn run_in_tempdir(cfg: &mut ExperimentConfig, f: fn(&ExperimentConfig) -> pgd_core::Result<Outcome>) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    cfg.out_dir = dir.path().to_path_buf();
    let out = f(cfg).unwrap();
    drop(dir);
    out
}

/// The default rates experiment, shared by criteria 3 to 6.
fn rates() -> &'static Value {
    static RATES: OnceLock<Value> = OnceLock::new();
    RATES.get_or_init(|| {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::Rates);
        run_in_tempdir(&mut cfg, cmd_rates).summary
    })
}

fn runs(summary: &Value) -> &Vec<Value> {
    summary["runs"].as_array().unwrap()
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

#[test]
fn criterion_01_identity() {
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::CheckIdentities);
    let start = Instant::now();
    let out = run_in_tempdir(&mut cfg, cmd_check_identities);
    let elapsed = start.elapsed();
    let s = &out.summary;
    let pass = out.passed && s["instances"] == 1000 && elapsed < Duration::from_secs(10);
    report(
        1,
        pass,
        format!(
            "{} instances, max relative residual {:.2e}, {:.2?}",
            s["instances"],
            f(&s["max_relative_residual"]),
            elapsed
        ),
    );
}

// ---------------------------------------------------------------- criterion 2

const DRAWS: usize = 10_000;
const P_GRID: [f64; 6] = [1.1, 1.5, 2.0, 3.0, 6.0, 10.0];

fn naive_psi(w: &[f64], p: f64) -> f64 {
    w.iter().map(|x| x.abs().powf(p)).sum::<f64>() / p
}

fn naive_grad(w: &[f64], p: f64) -> Vec<f64> {
    w.iter().map(|x| x.signum() * x.abs().powf(p - 1.0)).collect()
}

fn naive_norm(w: &[f64], p: f64) -> f64 {
    w.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
}

fn draw(rng: &mut ChaCha8Rng) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = P_GRID[rng.gen_range(0..P_GRID.len())];
    let d = rng.gen_range(1..10);
    let mut v = || (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>();
    let (x, y, z) = (v(), v(), v());
    (p, x, y, z)
}

fn wv(x: &[f64]) -> WeightVector {
    WeightVector::new(x.to_vec()).unwrap()
}

/// Counts the draws on which `check` fails.
fn suite(seed: u64, check: impl Fn(&mut ChaCha8Rng) -> bool) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..DRAWS).filter(|_| !check(&mut rng)).count()
}

#[test]
fn criterion_02_property_suites() {
    let start = Instant::now();
    let results = [
        ("homogeneity", suite(1, |rng| {
            let (p, x, y, _) = draw(rng);
            let c: f64 = rng.gen_range(0.05..10.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let psi = Potential::new(p).unwrap();
            let d = psi.bregman(&wv(&x), &wv(&y)).unwrap();
            let cx: Vec<f64> = x.iter().map(|v| c * v).collect();
            let cy: Vec<f64> = y.iter().map(|v| c * v).collect();
            let dc = psi.bregman(&wv(&cx), &wv(&cy)).unwrap();
            let want = c.abs().powf(p) * d;
            let floor = 1e-13 * c.abs().powf(p) * (naive_psi(&x, p) + naive_psi(&y, p));
            (dc - want).abs() <= 1e-9 * want.abs() + floor
        })),
        ("round trip", suite(2, |rng| {
            let (p, x, _, _) = draw(rng);
            let psi = Potential::new(p).unwrap();
            let back = psi.inverse_mirror_map(&psi.mirror_map(&wv(&x)).unwrap()).unwrap();
            x.iter().zip(back.as_slice()).all(|(a, b)| (a - b).abs() <= 1e-10 * a.abs().max(1e-300))
        })),
        ("dual norm", suite(3, |rng| {
            let (p, x, _, _) = draw(rng);
            let q = p / (p - 1.0);
            let want = naive_norm(&naive_grad(&x, p), q);
            let got = Potential::new(p).unwrap().dual_norm_of_gradient(&wv(&x)).unwrap();
            let via_norm = naive_norm(&x, p).powf(p - 1.0);
            (got - want).abs() <= 1e-10 * want && (got - via_norm).abs() <= 1e-10 * via_norm
        })),
        ("inner product", suite(4, |rng| {
            let (p, x, _, _) = draw(rng);
            let psi = Potential::new(p).unwrap();
            let got = inner(&psi.mirror_map(&wv(&x)).unwrap(), &wv(&x)).unwrap();
            let want = naive_norm(&x, p).powf(p);
            (got - want).abs() <= 1e-10 * want
        })),
        ("law of cosine", suite(5, |rng| {
            let (p, x, y, z) = draw(rng);
            let psi = Potential::new(p).unwrap();
            let d = |a: &[f64], b: &[f64]| psi.bregman(&wv(a), &wv(b)).unwrap();
            let (gy, gz) = (naive_grad(&y, p), naive_grad(&z, p));
            let corr: f64 = (0..x.len()).map(|j| (gy[j] - gz[j]) * (x[j] - z[j])).sum();
            let lhs = d(&x, &y);
            let rhs = d(&x, &z) + d(&z, &y) - corr;
            let scale = 1.0 + lhs.abs() + d(&x, &z).abs() + d(&z, &y).abs() + corr.abs();
            (lhs - rhs).abs() <= 1e-9 * scale
        })),
        ("scalar inequalities", suite(6, |rng| {
            let delta: f64 = rng.gen_range(-1.0..10.0);
            let p: f64 = rng.gen_range(1.0001..12.0);
            let a = 1.0 + delta;
            let slack = 1e-12 * (1.0 + a.powf(p));
            (p - 1.0) / p * (a.powf(p) - 1.0) >= a.powf(p - 1.0) - 1.0 - slack
                && (a.powf(p) - 1.0) / p <= delta * a.powf(p - 1.0) + slack
        })),
    ];
    let elapsed = start.elapsed();
    let failures: Vec<String> = results
        .iter()
        .filter(|r| r.1 > 0)
        .map(|r| format!("{} ({} of {DRAWS})", r.0, r.1))
        .collect();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(30);
    let detail = if failures.is_empty() {
        format!("6 suites x {DRAWS} draws clean, {elapsed:.2?}")
    } else {
        format!("failing: {}, {elapsed:.2?}", failures.join(", "))
    };
    report(2, pass, detail);
}

#[test]
fn criterion_03_monotone_loss() {
    let mut worst = Vec::new();
    for r in runs(rates()) {
        worst.push(format!("R2 p={} {:.2e}", r["p"], f(&r["max_loss_increase"])));
    }
    let r2_ok = runs(rates()).iter().all(|r| f(&r["max_loss_increase"]) <= MONOTONE_TOLERANCE);

    let cfg = ExperimentConfig::defaults(ExperimentKind::BiasTable);
    let data = cfg.load_dataset().unwrap();
    let w0 = gaussian_weights(data.dim(), cfg.init_std(), cfg.seed);
    let mut r100_ok = true;
    for &p in &cfg.p_values {
        let (_, trace) = run_pgd(&cfg.pgd_config(p).unwrap(), cfg.loss, &data, &w0, None).unwrap();
        let inc = trace.max_loss_increase.unwrap();
        r100_ok &= inc <= MONOTONE_TOLERANCE;
        worst.push(format!("R100 p={p} {inc:.2e}"));
    }
    report(3, r2_ok && r100_ok, format!("largest one-step loss increase: {}", worst.join(", ")));
}

#[test]
fn criterion_04_direction_convergence() {
    let details: Vec<String> = runs(rates())
        .iter()
        .map(|r| format!("p={} dist {:.4} tail {}", r["p"], f(&r["direction_distance"]), r["bregman_tail_nonincreasing"]))
        .collect();
    let pass = runs(rates())
        .iter()
        .all(|r| r["direction_pass"] == true && r["bregman_tail_nonincreasing"] == true);
    report(4, pass, details.join(", "));
}

#[test]
fn criterion_05_rate_shape() {
    let s = rates();
    let details: Vec<String> = runs(s)
        .iter()
        .map(|r| {
            format!(
                "p={} slope {:.2} (target {}) final D {:.3e}",
                r["p"],
                f(&r["slope"]),
                r["slope_target"],
                f(&r["final_bregman"])
            )
        })
        .collect();
    let pass = runs(s).iter().all(|r| r["slope_pass"] == true) && s["ordering_pass"] == true;
    report(5, pass, format!("{}; ordering {}", details.join(", "), s["ordering_pass"]));
}

#[test]
fn criterion_06_norm_growth() {
    let details: Vec<String> = runs(rates())
        .iter()
        .map(|r| {
            format!(
                "p={} ratio {:.3} band [{:.3}, {:.3}]",
                r["p"],
                f(&r["norm_ratio"]),
                f(&r["norm_band"][0]),
                f(&r["norm_band"][1])
            )
        })
        .collect();
    let pass = runs(rates()).iter().all(|r| r["norm_pass"] == true);
    report(6, pass, details.join(", "));
}

#[test]
fn criterion_07_bias_table() {
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::BiasTable);
    let out = run_in_tempdir(&mut cfg, cmd_bias_table);
    let details: Vec<String> = out.summary["diagonal"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| format!("l_{} won by p={}", d["q"], d["argmin_p"]))
        .collect();
    report(7, out.passed, details.join(", "));
}

#[test]
fn criterion_08_oracle() {
    let pair = gen_symmetric_pair();
    let mut pair_err = 0.0f64;
    for p in [1.5, 2.0, 3.0, 10.0] {
        let sol = max_margin_direction(&pair, p, DEFAULT_MARGIN_TOL).unwrap();
        pair_err = pair_err.max((sol.margin - 2f64.powf(-1.0 / p)).abs());
    }
    let mut grid_err = 0.0f64;
    let mut instances = 0;
    for seed in 0..10 {
        let data = gen_random_separable(seed, 6, 2, 0.1).unwrap();
        for p in [1.5, 2.0, 3.0, 10.0] {
            let sol = max_margin_direction(&data, p, DEFAULT_MARGIN_TOL).unwrap();
            grid_err = grid_err.max((sol.margin - brute_force_margin(&data, p)).abs());
            instances += 1;
        }
    }
    let pass = pair_err <= 1e-4 && grid_err <= 1e-3;
    report(
        8,
        pass,
        format!("symmetric pair error {pair_err:.2e}, grid error {grid_err:.2e} over {instances} instances"),
    );
}

#[test]
fn criterion_09_reg_path() {
    let mut pass = true;
    let mut details = Vec::new();
    for loss in [Loss::Exponential, Loss::Logistic] {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::RegPath);
        cfg.loss = loss;
        let out = run_in_tempdir(&mut cfg, cmd_reg_path);
        pass &= out.passed;
        for r in out.summary["results"].as_array().unwrap() {
            details.push(format!(
                "{} p={} final {:.2e} monotone {}",
                loss.name(),
                r["p"],
                f(&r["final_distance"]),
                r["monotone"]
            ));
        }
    }
    report(9, pass, details.join(", "));
}

#[test]
fn criterion_10_toynet_trends() {
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::ToynetHist);
    let out = run_in_tempdir(&mut cfg, cmd_toynet_hist);
    let details: Vec<String> = out.summary["medians"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| {
            format!(
                "p={} near-zero {:.4} max|w| {:.3}",
                m["p"],
                f(&m["near_zero_fraction"]),
                f(&m["max_abs_weight"])
            )
        })
        .collect();
    report(10, out.passed, details.join(", "));
}

// ---------------------------------------------------------------- criterion 11

fn pgd_cli(args: &[&str], out: &Path) -> i32 {
    let status = Command::new(env!("CARGO_BIN_EXE_pgd"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "error")
        .status()
        .unwrap();
    status.code().unwrap_or(-1)
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_11_determinism() {
    let commands: [&[&str]; 6] = [
        &["gen-data", "--kind", "r100_sparse"],
        &["rates", "--iters", "200000"],
        &["bias-table", "--iters", "20000"],
        &["reg-path"],
        &["toynet-hist", "--iters", "2000"],
        &["check-identities"],
    ];
    let mut pass = true;
    let mut details = Vec::new();
    for args in commands {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let code_a = pgd_cli(args, a.path());
        // A different worker count must not change a byte.
        let mut again = args.to_vec();
        again.extend(["--workers", "2"]);
        let code_b = pgd_cli(&again, b.path());
        let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
        let ok = matches!(code_a, 0 | 2) && code_a == code_b && !sa.is_empty() && sa == sb;
        pass &= ok;
        details.push(format!("{} {} files {}", args[0], sa.len(), if ok { "identical" } else { "DIFFER" }));
    }
    report(11, pass, details.join(", "));
}
