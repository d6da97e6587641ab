//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr (uncaptured) before asserting, so `cargo test --test acceptance`
//! shows the full scorecard.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use fedsmc::audit::{check_disclosure, count_messages};
use fedsmc::data::Example;
use fedsmc::experiment::compare;
use fedsmc::model::{init_weights, loss_and_grad, ModelKind, ModelSpec};
use fedsmc::protocol::{assign_clusters, dp_perturb, run_training, RunConfig, RunOptions, StrategyKind};
use fedsmc::rng::{substream, Purpose, Stream};
use fedsmc::sharing::{
    accumulate_shares, make_shares, reconstruct_mean, sample_coefficients, CoefficientVector, ExponentialSimplex, Share,
};
use fedsmc::WeightVector;

fn verdict(id: u32, name: &str, ok: bool, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    let line = format!("acceptance {id} [{status}] {name}: {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

fn rng(seed: u64) -> Stream {
    substream(seed, Purpose::InitWeights, 0, 0)
}

#[test]
fn c1_reconstruction_is_exact() {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for trial in 0..100 {
        let k = r.random_range(2..=12usize);
        let divisors: Vec<usize> = (1..=k / 2).filter(|m| k % m == 0).collect();
        let m = divisors[r.random_range(0..divisors.len())];
        let scale = 10f64.powi(r.random_range(-3..=3));
        let weights: Vec<WeightVector> = (0..k)
            .map(|_| WeightVector::new((0..1000).map(|_| scale * r.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let clusters = assign_clusters(k, m, &mut r).unwrap();

        let mut shares: Vec<Share> = Vec::new();
        for (c, members) in clusters.members.iter().enumerate() {
            for &h in members {
                let coeffs = CoefficientVector::draw(h, c, members, &ExponentialSimplex, &mut r).unwrap();
                shares.extend(make_shares(&weights[h - 1], &coeffs, trial).unwrap());
            }
        }
        let mut sums = Vec::new();
        for (c, members) in clusters.members.iter().enumerate() {
            for &h in members {
                let held: Vec<Share> = shares.iter().filter(|s| s.target == h).cloned().collect();
                sums.push(accumulate_shares(h, c, members, trial, &held).unwrap());
            }
        }
        let got = reconstruct_mean(&sums, k).unwrap();

        // Oracle: plain coordinate-wise mean.
        let max_abs = weights.iter().map(|w| w.max_abs()).fold(0.0, f64::max);
        let err = (0..1000)
            .map(|i| {
                let mean = weights.iter().map(|w| w[i]).sum::<f64>() / k as f64;
                (got[i] - mean).abs()
            })
            .fold(0.0, f64::max)
            / max_abs;
        worst = worst.max(err);
        if err >= 1e-9 {
            failures += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "reconstruction exactness",
        failures == 0 && elapsed < Duration::from_secs(5),
        &format!("100 trials, worst relative error {worst:.2e}, {failures} over 1e-9, {elapsed:.2?}"),
    );
}

#[test]
fn c2_smc_matches_fedavg_end_to_end() {
    let start = Instant::now();
    let base = RunConfig { rounds: 50, ..RunConfig::default() };
    let run = |s| run_training(&RunConfig { strategy: s, ..base.clone() }, RunOptions::default()).unwrap();
    let fedavg = run(StrategyKind::Fedavg);
    let smc = run(StrategyKind::Smc);

    let scale = fedavg.final_weights.max_abs();
    let weight_err = fedavg
        .final_weights
        .as_slice()
        .iter()
        .zip(smc.final_weights.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale;
    let curve_err = fedavg
        .report
        .curves
        .iter()
        .zip(&smc.report.curves)
        .map(|(a, b)| (a.avg_test_acc - b.avg_test_acc).abs())
        .fold(0.0, f64::max);
    let same_len = fedavg.report.curves.len() == 50 && smc.report.curves.len() == 50;
    let elapsed = start.elapsed();
    verdict(
        2,
        "smc equals fedavg",
        same_len && weight_err <= 1e-6 && curve_err <= 1e-6 && elapsed < Duration::from_secs(60),
        &format!("T=50, final weights rel err {weight_err:.2e}, curve max diff {curve_err:.2e}, {elapsed:.2?}"),
    );
}

#[test]
fn c3_compare_ordering() {
    let start = Instant::now();
    let cfg = RunConfig::default();
    assert_eq!((cfg.rounds, cfg.repeats), (300, 5));
    let cmp = compare(&cfg).unwrap();
    let acc = |s| cmp.report(s).unwrap().avg_accuracy;
    let (fedavg, dp, smc) = (acc(StrategyKind::Fedavg), acc(StrategyKind::Dp), acc(StrategyKind::Smc));
    let elapsed = start.elapsed();
    verdict(
        3,
        "compare ordering",
        (smc - fedavg).abs() <= 1.0 && fedavg - dp >= 2.0 && elapsed < Duration::from_secs(600),
        &format!("fedavg {fedavg:.2}, smc {smc:.2}, dp {dp:.2} (gap {:.2}), {elapsed:.2?}", fedavg - dp),
    );
}

#[test]
fn c4_simplex_invariants() {
    let start = Instant::now();
    let mut r = rng(4);
    let mut bad = 0;
    let mut worst = 0.0f64;
    for n in [2usize, 3, 6] {
        for _ in 0..10_000 {
            let b = sample_coefficients(n, &mut r).unwrap();
            let dev = (b.iter().sum::<f64>() - 1.0).abs();
            worst = worst.max(dev);
            if b.len() != n || dev > 1e-12 || b.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
                bad += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        4,
        "simplex invariants",
        bad == 0 && elapsed < Duration::from_secs(1),
        &format!("30000 draws, {bad} invalid, worst sum deviation {worst:.2e}, {elapsed:.2?}"),
    );
}

#[test]
fn c5_communication_overhead() {
    let base = RunConfig::default();
    assert_eq!((base.clients, base.clusters, base.rounds), (6, 2, 300));
    let count = |s| {
        let out = run_training(&RunConfig { strategy: s, ..base.clone() }, RunOptions::default()).unwrap();
        count_messages(&out.log).total.messages
    };
    let (smc, fedavg) = (count(StrategyKind::Smc), count(StrategyKind::Fedavg));
    let ratio = smc as f64 / fedavg as f64;
    verdict(
        5,
        "communication overhead",
        smc == 7200 && fedavg == 3600 && ratio == 2.0,
        &format!("smc {smc} messages, fedavg {fedavg}, ratio {ratio}"),
    );
}

#[test]
fn c6_privacy_audit() {
    let start = Instant::now();
    let base = RunConfig::default();
    let expected = base.clients * base.rounds;
    let opts = RunOptions { keep_payloads: true };
    let mut smc_leaks = 0;
    let mut fedavg_off = 0;
    for seed in 0..20u64 {
        for strategy in [StrategyKind::Smc, StrategyKind::Fedavg] {
            let cfg = RunConfig { strategy, master_seed: seed, ..base.clone() };
            let out = run_training(&cfg, opts).unwrap();
            let audit = check_disclosure(&out.log, out.true_weights.as_ref().unwrap(), 1e-6).unwrap();
            match strategy {
                StrategyKind::Smc => smc_leaks += audit.server_disclosures.len(),
                _ => fedavg_off += usize::from(audit.server_disclosures.len() != expected),
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        6,
        "privacy audit",
        smc_leaks == 0 && fedavg_off == 0 && elapsed < Duration::from_secs(120),
        &format!(
            "20 seeds x T={}: smc server disclosures {smc_leaks}, fedavg runs without K*T={expected} disclosures {fedavg_off}, {elapsed:.2?}",
            base.rounds
        ),
    );
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[test]
fn c7_dp_noise_calibration() {
    let sigma = 0.03;
    let zeros = WeightVector::zeros(100_000).unwrap();
    let noisy = dp_perturb(&zeros, sigma, &mut substream(7, Purpose::DpNoise, 1, 0)).unwrap();
    let per_coord = std_dev(noisy.as_slice());

    // Server-side: the mean of six independently perturbed uploads.
    let w = WeightVector::new(vec![0.5]).unwrap();
    let averaged: Vec<f64> = (0..1000u64)
        .map(|t| {
            let sum: f64 = (1..=6u64)
                .map(|k| dp_perturb(&w, sigma, &mut substream(7, Purpose::DpNoise, k, t)).unwrap()[0] - 0.5)
                .sum();
            sum / 6.0
        })
        .collect();
    let avg_std = std_dev(&averaged);
    let target = sigma / 6f64.sqrt();
    let ok = (per_coord / sigma - 1.0).abs() <= 0.02 && (avg_std / target - 1.0).abs() <= 0.10;
    verdict(
        7,
        "dp calibration",
        ok,
        &format!("per-coordinate std {per_coord:.5} (target 0.03), averaged std {avg_std:.5} (target {target:.5})"),
    );
}

#[test]
fn c8_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut r = rng(8);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        for kind in [ModelKind::Logistic, ModelKind::Mlp] {
            let d = r.random_range(1..=6usize);
            let spec = match kind {
                ModelKind::Logistic => ModelSpec::logistic(d),
                ModelKind::Mlp => ModelSpec::mlp(d, r.random_range(1..=5usize)),
            };
            let mut w = init_weights(&spec, &mut r).unwrap().into_vec();
            for v in &mut w {
                *v += r.random_range(-0.5..0.5);
            }
            let w = WeightVector::new(w).unwrap();
            let batch: Vec<Example> = (0..r.random_range(1..=8usize))
                .map(|_| Example {
                    features: (0..d).map(|_| r.random_range(-2.0..2.0)).collect(),
                    label: r.random_range(0..=1u8),
                })
                .collect();
            let refs: Vec<&Example> = batch.iter().collect();
            let (_, g) = loss_and_grad(&spec, &w, &refs).unwrap();
            let loss = |v: Vec<f64>| loss_and_grad(&spec, &WeightVector::new(v).unwrap(), &refs).unwrap().0;
            let eps = 1e-6;
            for i in 0..w.dim() {
                let mut plus = w.as_slice().to_vec();
                let mut minus = plus.clone();
                plus[i] += eps;
                minus[i] -= eps;
                let numeric = (loss(plus) - loss(minus)) / (2.0 * eps);
                let err = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        8,
        "gradient correctness",
        worst < 1e-5 && elapsed < Duration::from_secs(5),
        &format!("100 instances per model kind, worst relative error {worst:.2e}, {elapsed:.2?}"),
    );
}

fn cli_run(out: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_fedsmc"))
        .args(["run", "--rounds", "40", "--seed", "9", "--out"])
        .arg(out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
}

#[test]
fn c9_cli_runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cli_run(&a);
    cli_run(&b);
    let mut differing = Vec::new();
    for name in ["table.csv", "curves.csv", "messages.log", "audit.json", "config.resolved.json"] {
        if std::fs::read(a.join(name)).unwrap() != std::fs::read(b.join(name)).unwrap() {
            differing.push(name);
        }
    }
    verdict(
        9,
        "determinism",
        differing.is_empty(),
        &format!("two identical `run` invocations, differing files: {differing:?}"),
    );
}
