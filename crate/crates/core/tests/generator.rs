use cdet::io::{load_generator, save_generator};
use cdet::mdn::{self, MdnGenerator, MdnSpec};
use cdet::rng::{rng_from_seed, stream_seed, Stream};
use cdet::Dataset;
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

/// `y = 2x + 0.5 e` with `x ~ U(-1, 1)`.
fn linear_data(n: usize, seed: u64) -> Dataset {
    let mut rng = rng_from_seed(seed);
    let mut data = Dataset::empty(1, 1);
    for _ in 0..n {
        let x: f64 = rng.random_range(-1.0..1.0);
        let e: f64 = rng.sample(StandardNormal);
        data.push(&[2.0 * x + 0.5 * e], &[x]);
    }
    data
}

fn trained() -> MdnGenerator {
    let spec = MdnSpec::new(1, 1, 2, vec![16, 8]);
    mdn::train(&linear_data(3000, 5), &spec, stream_seed(5, Stream::Training)).unwrap().0
}

#[test]
fn fitted_generator_tracks_conditional_law() {
    let gen = trained();
    for x in [-0.5, 0.0, 0.5] {
        let m = gen.conditional_mean(&[x]).unwrap()[0];
        assert!((m - 2.0 * x).abs() < 0.15, "mean at {x}: {m}");
    }

    // Density in original units integrates to one.
    let (lo, hi, steps) = (-8.0, 8.0, 8000);
    let h = (hi - lo) / steps as f64;
    for x in [-0.7, 0.2] {
        let mass: f64 = (0..=steps)
            .map(|k| {
                let y = lo + k as f64 * h;
                let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
                w * gen.density_original(&[y], &[x]).unwrap().value
            })
            .sum::<f64>()
            * h;
        assert!((mass - 1.0).abs() < 1e-3, "mass at {x}: {mass}");
    }
}

#[test]
fn samples_follow_the_fitted_mixture() {
    let gen = trained();
    let x = [0.3];
    let mix = gen.mixture_at(&x).unwrap();
    let map = &gen.normalization().response;
    let cdf = |y: f64| {
        let z = (y - map.offset[0]) / map.scale[0];
        (0..mix.components())
            .map(|g| mix.alphas[g] * Normal::new(mix.mean(g)[0], mix.sigmas[g]).unwrap().cdf(z))
            .sum::<f64>()
    };
    let n = 4000;
    let mut draws: Vec<f64> = (0..n).map(|i| gen.sample(&x, 1000 + i as u64).unwrap()[0]).collect();
    draws.sort_by(f64::total_cmp);
    let ks = draws
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let f = cdf(y);
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    // 1% critical value of the one-sample KS statistic.
    assert!(ks < 1.63 / (n as f64).sqrt(), "KS distance {ks}");
}

#[test]
fn persisted_generator_round_trips() {
    let gen = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gen.json");
    save_generator(&path, &gen).unwrap();
    let back = load_generator(&path).unwrap();
    let mut rng = rng_from_seed(77);
    for _ in 0..1000 {
        let x: f64 = rng.random_range(-1.5..1.5);
        let y: f64 = rng.random_range(-5.0..5.0);
        let a = gen.density_original(&[y], &[x]).unwrap().log_value;
        let b = back.density_original(&[y], &[x]).unwrap().log_value;
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    assert_eq!(gen.sample(&[0.2], 9).unwrap(), back.sample(&[0.2], 9).unwrap());
}

#[test]
fn training_is_reproducible() {
    let data = linear_data(400, 8);
    let spec = MdnSpec::new(1, 1, 2, vec![8]);
    let (a, sa) = mdn::train(&data, &spec, 3).unwrap();
    let (b, sb) = mdn::train(&data, &spec, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}
