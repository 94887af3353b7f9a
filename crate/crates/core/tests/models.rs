use cdet::io::{default_roles, load_table, write_table};
use cdet::rng::rng_from_seed;
use cdet::sim::{generate_model, trim_support, Model, Regime, SimulationSpec, BETA};
use cdet::{Dataset, TestMethod};
use nalgebra::{DMatrix, DVector};

fn spec(model: Model, regime: Regime, n1: usize, n2: usize) -> SimulationSpec {
    SimulationSpec::new(model, regime, n1, n2, TestMethod::Gp)
}

/// Least squares with an intercept column; returns `[b0, b1, ..]`.
fn ols(data: &Dataset, response: usize) -> Vec<f64> {
    let (n, d) = (data.len(), data.d());
    let x = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { data.covariate(i)[j - 1] });
    let y = DVector::from_fn(n, |i, _| data.response(i)[response]);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * y;
    xtx.cholesky().unwrap().solve(&xty).iter().copied().collect()
}

#[test]
fn first_model_recovers_linear_coefficients() {
    let (d1, d2) = generate_model(&spec(Model::M1, Regime::Alternative, 100_000, 100_000), 4);
    let b1 = ols(&d1, 0);
    let b2 = ols(&d2, 0);
    assert!(b1[0].abs() < 0.02, "{b1:?}");
    assert!((b2[0] - 0.5).abs() < 0.03, "{b2:?}");
    for j in 0..5 {
        assert!((b1[j + 1] - BETA[j]).abs() < 0.02, "{b1:?}");
        assert!((b2[j + 1] - BETA[j]).abs() < 0.02, "{b2:?}");
    }
    // Second-sample covariate means follow the shift.
    let n = d2.len() as f64;
    let means: Vec<f64> = (0..5).map(|j| (0..d2.len()).map(|i| d2.covariate(i)[j]).sum::<f64>() / n).collect();
    for (m, target) in means.iter().zip([1.0, 1.0, -1.0, -1.0, 0.0]) {
        assert!((m - target).abs() < 0.02, "{means:?}");
    }
}

#[test]
fn second_sample_covariate_supports() {
    let (_, d2) = generate_model(&spec(Model::M2, Regime::Null, 10, 5000), 1);
    for i in 0..d2.len() {
        assert!(d2.covariate(i).iter().all(|v| (0.5..=1.0).contains(&v.abs())));
    }
    let (_, d5) = generate_model(&spec(Model::M5, Regime::Null, 10, 5000), 1);
    for i in 0..d5.len() {
        for pair in d5.covariate(i).chunks_exact(2) {
            let r = pair[0].hypot(pair[1]);
            assert!((0.5 - 1e-12..=1.0 + 1e-12).contains(&r), "radius {r}");
        }
    }
}

#[test]
fn residuals_are_centred_for_every_model() {
    let mut mean = vec![0.0; 2];
    for model in Model::ALL {
        let n = if model == Model::M6 { 20_000 } else { 50_000 };
        let (d1, _) = generate_model(&spec(model, Regime::Null, n, 10), 2);
        let mut total = vec![0.0; model.p()];
        for i in 0..d1.len() {
            model.conditional_mean(d1.covariate(i), &mut mean[..model.p()]);
            for (t, (y, m)) in total.iter_mut().zip(d1.response(i).iter().zip(&mean)) {
                *t += y - m;
            }
        }
        for t in total {
            let avg = t / n as f64;
            assert!(avg.abs() < 0.05, "{model}: residual mean {avg}");
        }
    }
}

#[test]
fn bivariate_model_has_small_ring_noise() {
    let (d1, _) = generate_model(&spec(Model::M7, Regime::Null, 50_000, 10), 3);
    let mut mean = [0.0; 2];
    let mut ss = [0.0; 2];
    for i in 0..d1.len() {
        Model::M7.conditional_mean(d1.covariate(i), &mut mean);
        for k in 0..2 {
            let r = d1.response(i)[k] - mean[k];
            ss[k] += r * r;
        }
    }
    // Var(w sin 2u) = Var(w cos 2u) ~ 1/6 - small correction, plus 0.01 noise.
    for s in ss {
        let v = s / d1.len() as f64;
        assert!((0.1..0.25).contains(&v), "variance {v}");
    }
}

#[test]
fn trimming_matches_support_overlap() {
    let mut dropped = [0usize; 2];
    let mut total = [0usize; 2];
    for (k, model) in [Model::M1, Model::M2].into_iter().enumerate() {
        for seed in 0..20 {
            let (d1, d2) = generate_model(&spec(model, Regime::Null, 1000, 1000), seed);
            let (kept, gone) = trim_support(&d2, &d1).unwrap();
            assert_eq!(kept.len() + gone, d2.len());
            dropped[k] += gone;
            total[k] += d2.len();
        }
    }
    // Shifted Gaussian covariates leave a few percent outside the first
    // sample's range; bounded covariates never do.
    let frac = dropped[0] as f64 / total[0] as f64;
    assert!((0.01..0.15).contains(&frac), "M1 drop fraction {frac}");
    assert_eq!(dropped[1], 0);
}

#[test]
fn regime_changes_only_second_sample() {
    let null = spec(Model::M3, Regime::Null, 200, 200);
    let alt = spec(Model::M3, Regime::Alternative, 200, 200);
    let (a1, a2) = generate_model(&null, 11);
    let (b1, b2) = generate_model(&alt, 11);
    assert_eq!(a1, b1);
    assert_eq!(a2.covariates(), b2.covariates());
    for i in 0..a2.len() {
        assert!((b2.response(i)[0] - a2.response(i)[0] - 0.5).abs() < 1e-12);
    }
}

#[test]
fn csv_round_trip_is_exact() {
    let (d1, _) = generate_model(&spec(Model::M7, Regime::Null, 300, 10), 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m7.csv");
    let roles = default_roles(2, 5);
    write_table(&path, &d1, &roles).unwrap();
    let back = load_table(&path, &roles).unwrap();
    assert!(back.skipped_rows.is_empty());
    assert_eq!(back.dataset, d1);
    // A column subset reorders nothing else.
    let sub = load_table(&path, &cdet::io::ColumnRoles::new(["y2"], ["x3"])).unwrap().dataset;
    for i in 0..d1.len() {
        assert_eq!(sub.response(i)[0], d1.response(i)[1]);
        assert_eq!(sub.covariate(i)[0], d1.covariate(i)[2]);
    }
}

#[test]
fn covariate_draws_are_stream_local() {
    let mut a = rng_from_seed(1);
    let mut b = rng_from_seed(1);
    let mut xa = vec![0.0; 10];
    let mut xb = vec![0.0; 10];
    Model::M5.draw_covariates(true, &mut a, &mut xa);
    Model::M5.draw_covariates(true, &mut b, &mut xb);
    assert_eq!(xa, xb);
}
