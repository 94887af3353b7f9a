//! End-to-end acceptance suite. Each test writes one `PASS` or `FAIL` line
//! to stderr (uncaptured) before asserting.

use std::io::Write;
use std::time::Instant;

use cdet::gca::acc_statistic;
use cdet::gp::{adaptive_grid, adaptive_permutation_test, kernel_h, permutation_test, u_statistic, DiscretizedSample, PermutationConfig};
use cdet::mdn::{self, MdnSpec};
use cdet::nn::{init_params, Activation, FnnParams, FnnSpec};
use cdet::rng::{derive_seed, rng_from_seed, Rng as CdetRng};
use cdet::sim::{run_trials, Model, Regime, SimulationSpec};
use cdet::{Dataset, ExecMode, TestMethod};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

fn report(criterion: &str, pass: bool, detail: &str, start: Instant) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("{verdict} {criterion}: {detail} ({:.1}s)\n", start.elapsed().as_secs_f64());
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn naive_u(a: &[u128], b: &[u128]) -> f64 {
    let m = a.len();
    let mut total = 0i64;
    for i in 0..m {
        for j in (0..m).filter(|&j| j != i) {
            for k in 0..m {
                for l in (0..m).filter(|&l| l != k) {
                    total += kernel_h(a[i], a[j], b[k], b[l]) as i64;
                }
            }
        }
    }
    let mm = (m * (m - 1)) as f64;
    total as f64 / (mm * mm)
}

#[test]
fn c1_u_statistic_matches_quadruple_sum() {
    let start = Instant::now();
    let mut rng = rng_from_seed(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let m = rng.random_range(2..=6);
        let cells = rng.random_range(1..=5u128);
        let a: Vec<u128> = (0..m).map(|_| rng.random_range(1..=cells)).collect();
        let b: Vec<u128> = (0..m).map(|_| rng.random_range(1..=cells)).collect();
        let fast = u_statistic(&DiscretizedSample { cells: a.clone(), clamped: 0 }, &DiscretizedSample { cells: b.clone(), clamped: 0 })
            .unwrap();
        worst = worst.max((fast - naive_u(&a, &b)).abs());
    }
    let pass = worst <= 1e-12;
    report("criterion 1 (U oracle equivalence)", pass, &format!("max |fast - naive| = {worst:e}"), start);
    assert!(pass);
}

#[test]
fn c2_kernel_table() {
    let start = Instant::now();
    let w = |a: u128, b: u128| (a == b) as i32;
    let mut mismatches = 0;
    for u1 in 0..3 {
        for u2 in 0..3 {
            for v1 in 0..3 {
                for v2 in 0..3 {
                    let expected = w(u1, u2) + w(v1, v2) - w(u1, v2) - w(u2, v1);
                    mismatches += (kernel_h(u1, u2, v1, v2) != expected) as usize;
                }
            }
        }
    }
    let pass = mismatches == 0;
    report("criterion 2 (kernel table)", pass, &format!("{mismatches} of 81 mismatches"), start);
    assert!(pass);
}

#[test]
fn c3_gradient_check() {
    let start = Instant::now();
    let spec = FnnSpec::new(4, vec![9, 6], 3, Activation::LeakyRelu(0.01), 5);
    let mut rng = rng_from_seed(3);
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for probe in 0..100 {
        let params = init_params(&FnnSpec { seed: probe, ..spec.clone() }).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let loss = |p: &FnnParams| p.forward(&x).unwrap().iter().zip(&c).map(|(o, w)| o * w).sum::<f64>();
        let grad = params.backward(&x, &c).unwrap().params.to_flat();
        let flat = params.to_flat();
        let k = rng.random_range(0..flat.len());
        let mut plus = flat.clone();
        let mut minus = flat.clone();
        plus[k] += h;
        minus[k] -= h;
        let numeric = (loss(&FnnParams::from_flat(&spec, &plus).unwrap()) - loss(&FnnParams::from_flat(&spec, &minus).unwrap()))
            / (2.0 * h);
        let rel = (numeric - grad[k]).abs() / numeric.abs().max(grad[k].abs()).max(1e-8);
        // A probe straddling a kink is not a gradient error; skip exact zeros.
        if numeric.abs() > 1e-8 || grad[k].abs() > 1e-8 {
            worst = worst.max(rel);
        }
    }
    let pass = worst <= 1e-4;
    report("criterion 3 (gradient check)", pass, &format!("max relative error {worst:e}"), start);
    assert!(pass);
}

/// Draws `m` rows from a fixed multinomial on a 4x4 grid of cell centres.
/// The fitted grid depends only on the pooled rows, so permutations stay
/// exchangeable.
fn multinomial(m: usize, rng: &mut CdetRng) -> Dataset {
    const PROBS: [f64; 16] = [0.2, 0.1, 0.05, 0.05, 0.1, 0.08, 0.04, 0.03, 0.06, 0.05, 0.05, 0.04, 0.05, 0.04, 0.03, 0.03];
    let mut data = Dataset::empty(1, 1);
    for _ in 0..m {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut cell = PROBS.len() - 1;
        for (k, p) in PROBS.iter().enumerate() {
            acc += p;
            if u < acc {
                cell = k;
                break;
            }
        }
        data.push(&[(cell % 4) as f64 + 0.5], &[(cell / 4) as f64 + 0.5]);
    }
    data
}

#[test]
fn c4_permutation_validity() {
    let start = Instant::now();
    let trials = 500;
    let rejections: usize = ExecMode::default()
        .map_indices(trials, |t| {
            let mut rng = rng_from_seed(derive_seed(4, t as u64));
            let a = multinomial(60, &mut rng);
            let b = multinomial(60, &mut rng);
            let cfg = PermutationConfig { alpha: 0.05, side: 0.25, n_perm: 300, seed: t as u64, exec: ExecMode::Sequential };
            (permutation_test(&a, &b, &cfg).unwrap().p_value <= 0.05) as usize
        })
        .into_iter()
        .sum();
    let freq = rejections as f64 / trials as f64;
    let bound = 0.05 + 2.0 * (0.05f64 * 0.95 / 500.0).sqrt();
    let pass = freq <= bound;
    report("criterion 4 (permutation validity)", pass, &format!("P(p <= 0.05) = {freq:.4}, bound {bound:.4}"), start);
    assert!(pass);
}

fn frequency(model: Model, regime: Regime, n1: usize, n2: usize, method: TestMethod, trials: usize, seed: u64) -> f64 {
    let spec = SimulationSpec::new(model, regime, n1, n2, method).with_trials(trials).with_seed(seed);
    let table = run_trials(&spec).unwrap();
    let row = &table.rows[0];
    assert_eq!(row.failures, 0, "{}: {:?}", row.label, row.records.iter().find_map(|r| r.error.clone()));
    row.frequency().unwrap()
}

#[test]
fn c5_first_model_rejection_rates() {
    let start = Instant::now();
    let oracle_null = frequency(Model::M1, Regime::Null, 1000, 1000, TestMethod::OracleNn, 100, 0);
    let gca_null = frequency(Model::M1, Regime::Null, 1000, 1000, TestMethod::GcaNn, 100, 0);
    let gca_power = frequency(Model::M1, Regime::Alternative, 1000, 1000, TestMethod::GcaNn, 100, 0);
    let llr_power = frequency(Model::M1, Regime::Alternative, 1000, 1000, TestMethod::OracleLlr, 100, 0);
    let checks = [
        (0.01..=0.12).contains(&oracle_null),
        gca_null <= 0.12,
        gca_power >= 0.70,
        llr_power >= 0.90,
    ];
    let pass = checks.iter().all(|&c| c);
    report(
        "criterion 5 (model 1 rejection rates)",
        pass,
        &format!(
            "oracle-nn null {oracle_null:.2} in [0.01, 0.12], gca-nn null {gca_null:.2} <= 0.12, \
             gca-nn power {gca_power:.2} >= 0.70, oracle-llr power {llr_power:.2} >= 0.90"
        ),
        start,
    );
    assert!(pass);
}

#[test]
#[ignore = "slow: about three hours single-threaded; run with --ignored"]
fn c6_imbalanced_fifth_model() {
    let start = Instant::now();
    let null = frequency(Model::M5, Regime::Null, 50_000, 1000, TestMethod::GcaNn, 50, 0);
    let power = frequency(Model::M5, Regime::Alternative, 50_000, 1000, TestMethod::GcaNn, 50, 0);
    let pass = null <= 0.15 && power >= 0.70;
    report(
        "criterion 6 (model 5, n1 = 50000)",
        pass,
        &format!("gca-nn null {null:.2} <= 0.15, power {power:.2} >= 0.70"),
        start,
    );
    assert!(pass);
}

#[test]
fn c7_generator_density_and_sampler() {
    let start = Instant::now();
    let mut rng = rng_from_seed(7);
    let mut data = Dataset::empty(1, 1);
    for _ in 0..3000 {
        let x: f64 = rng.random_range(-1.0..1.0);
        // Bimodal conditional law so that both components matter.
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let e: f64 = rng.sample(StandardNormal);
        data.push(&[x + sign * 1.5 + 0.4 * e], &[x]);
    }
    let (gen, _) = mdn::train(&data, &MdnSpec::new(1, 1, 3, vec![16, 8]), 7).unwrap();
    let x = [0.25];

    // Monte Carlo mass: E_{U(a,b)}[f] (b - a) over a window holding the support.
    let (a, b) = (-8.0, 8.0);
    let n_mc = 200_000;
    let mass = (0..n_mc)
        .map(|_| gen.density_original(&[rng.random_range(a..b)], &x).unwrap().value)
        .sum::<f64>()
        / n_mc as f64
        * (b - a);

    let mix = gen.mixture_at(&x).unwrap();
    let map = &gen.normalization().response;
    let cdf = |y: f64| {
        let z = (y - map.offset[0]) / map.scale[0];
        (0..mix.components())
            .map(|g| mix.alphas[g] * Normal::new(mix.mean(g)[0], mix.sigmas[g]).unwrap().cdf(z))
            .sum::<f64>()
    };
    let n = 10_000;
    let mut draws: Vec<f64> = (0..n).map(|i| gen.sample(&x, i as u64).unwrap()[0]).collect();
    draws.sort_by(f64::total_cmp);
    let ks = draws
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let f = cdf(y);
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    let pass = (mass - 1.0).abs() <= 0.01 && ks < 0.02;
    report(
        "criterion 7 (generator density and sampler)",
        pass,
        &format!("mass {mass:.4} within 1%, KS {ks:.4} < 0.02"),
        start,
    );
    assert!(pass);
}

#[test]
fn c8_adaptive_grid_and_family_error() {
    let start = Instant::now();
    let v = adaptive_grid(1, 5, 2000).unwrap().levels;
    let trials = 200;
    let rejections: usize = ExecMode::default()
        .map_indices(trials, |t| {
            let mut rng = rng_from_seed(derive_seed(8, t as u64));
            let mut draw = || {
                let mut d = Dataset::empty(1, 5);
                for _ in 0..1000 {
                    let y: [f64; 1] = [rng.sample(StandardNormal)];
                    let x: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
                    d.push(&y, &x);
                }
                d
            };
            let (a, b) = (draw(), draw());
            let out = adaptive_permutation_test(&a, &b, 0.05, 0.0, 199, 2000, t as u64, ExecMode::Sequential).unwrap();
            out.reject as usize
        })
        .into_iter()
        .sum();
    let freq = rejections as f64 / trials as f64;
    let pass = v == 4 && freq <= 0.095;
    report(
        "criterion 8 (adaptive grid)",
        pass,
        &format!("v(1, 5, 2000) = {v}, family error {freq:.3} <= 0.095"),
        start,
    );
    assert!(pass);
}

#[test]
fn c9_accuracy_statistic_closed_form() {
    let start = Instant::now();
    let s = acc_statistic(0.4, 0.4, 100);
    let zero = acc_statistic(0.5, 0.5, 100);
    let pass = (s + 2.8868).abs() <= 1e-4 && zero == 0.0;
    report("criterion 9 (accuracy statistic)", pass, &format!("S(0.4, 0.4, 100) = {s:.5}, S(0.5, 0.5) = {zero}"), start);
    assert!(pass);
}

#[test]
fn power_grows_with_second_sample() {
    let start = Instant::now();
    let power: Vec<f64> = [250, 500, 1000]
        .into_iter()
        .map(|n2| frequency(Model::M1, Regime::Alternative, 1000, n2, TestMethod::GcaNn, 100, 10))
        .collect();
    let pass = power.windows(2).all(|w| w[1] >= w[0] - 0.1);
    report(
        "power monotone in n2",
        pass,
        &format!("gca-nn power at n2 = 250, 500, 1000: {power:.2?} (slack 0.1)"),
        start,
    );
    assert!(pass);
}
