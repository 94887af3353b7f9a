//! Generative permutation test.
//!
//! The synthesized half and the held-out half of the second sample are
//! mapped into the unit cube (one min-max map fitted on both), binned on an
//! equal-side hypercube grid, and compared with a two-sample U-statistic on
//! the cell labels. Calibration is by Monte Carlo permutation of the pooled
//! labels.
//!
//! The U-statistic averages
//! `h(u1, u2; v1, v2) = w(u1, u2) + w(v1, v2) - w(u1, v2) - w(u2, v1)`,
//! `w(a, b) = 1{a = b}`, over ordered distinct pairs within each sample. It
//! is computed from per-cell counts; the exact numerator is kept as an
//! integer so permutation ties are compared exactly.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{AffineMap, Dataset};
use crate::error::{CdetError, Result};
use crate::exec::ExecMode;
use crate::mdn::{self, ConditionalSampler, MdnSpec, TrainingSummary};
use crate::rng::{derive_seed, rng_from_seed, stream_rng, stream_seed, Stream};

/// Equal-side hypercube partition of `[0, 1]^dims`, together with the map
/// that sends data into the cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    dims: usize,
    side: f64,
    cells_per_axis: usize,
    map: AffineMap,
}

impl BinGrid {
    /// Grid on `[0, 1]^dims` with side `side` and an identity data map.
    pub fn unit(dims: usize, side: f64) -> Result<Self> {
        Self::with_map(AffineMap::identity(dims), side)
    }

    /// Fits the min-max map on the pooled rows of `samples` (joint `(y, x)`).
    pub fn fit(samples: &[&Dataset], side: f64) -> Result<Self> {
        let first = samples.first().ok_or_else(|| CdetError::precondition("no samples to fit a grid"))?;
        let dims = first.p() + first.d();
        let mut pooled = Vec::new();
        let mut row = vec![0.0; dims];
        for s in samples {
            first.check_dims(s)?;
            for i in 0..s.len() {
                s.joint_into(i, &mut row);
                pooled.extend_from_slice(&row);
            }
        }
        let (map, _) = AffineMap::min_max(&pooled, dims);
        Self::with_map(map, side)
    }

    fn with_map(map: AffineMap, side: f64) -> Result<Self> {
        if !(side > 0.0 && side <= 1.0) {
            return Err(CdetError::Config(format!("bin side {side} outside (0, 1]")));
        }
        let cells_per_axis = ((1.0 / side) - 1e-9).ceil().max(1.0) as usize;
        Ok(Self { dims: map.dim(), side, cells_per_axis, map })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn cells_per_axis(&self) -> usize {
        self.cells_per_axis
    }

    /// `cells_per_axis ^ dims`, or `None` if it does not fit in 128 bits.
    pub fn cell_count(&self) -> Option<u128> {
        (self.cells_per_axis as u128).checked_pow(self.dims as u32)
    }

    /// 1-based row-major cell index of a point already in unit-cube
    /// coordinates. Coordinates outside `[0, 1]` are clamped; the flag
    /// reports whether that happened.
    pub fn cell_of_unit(&self, z: &[f64]) -> (u128, bool) {
        let k = self.cells_per_axis;
        let mut clamped = false;
        let mut index: u128 = 0;
        for &zj in z {
            let mut v = zj;
            if !(0.0..=1.0).contains(&v) {
                clamped = true;
                v = v.clamp(0.0, 1.0);
            }
            let axis = ((v / self.side).floor() as usize).min(k - 1);
            index = index * k as u128 + axis as u128;
        }
        (index + 1, clamped)
    }
}

/// Cell labels of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedSample {
    pub cells: Vec<u128>,
    /// Rows that fell outside the unit cube and were clamped.
    pub clamped: usize,
}

impl DiscretizedSample {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

pub fn discretize(data: &Dataset, grid: &BinGrid) -> Result<DiscretizedSample> {
    if data.p() + data.d() != grid.dims {
        return Err(CdetError::DimensionMismatch {
            expected: grid.dims,
            actual: data.p() + data.d(),
            context: "grid dimension",
        });
    }
    if grid.cell_count().is_none() {
        return Err(CdetError::Config(format!(
            "grid with {} cells per axis in {} dimensions has too many cells to index",
            grid.cells_per_axis, grid.dims
        )));
    }
    let mut row = vec![0.0; grid.dims];
    let mut z = vec![0.0; grid.dims];
    let mut clamped = 0;
    let cells = (0..data.len())
        .map(|i| {
            data.joint_into(i, &mut row);
            grid.map.apply(&row, &mut z);
            let (c, was_clamped) = grid.cell_of_unit(&z);
            clamped += was_clamped as usize;
            c
        })
        .collect();
    if clamped > 0 {
        log::warn!("{clamped} rows fell outside the unit cube and were clamped into boundary cells");
    }
    Ok(DiscretizedSample { cells, clamped })
}

#[inline]
fn w(a: u128, b: u128) -> i32 {
    (a == b) as i32
}

/// `w(u1, u2) + w(v1, v2) - w(u1, v2) - w(u2, v1)`.
pub fn kernel_h(u1: u128, u2: u128, v1: u128, v2: u128) -> i32 {
    w(u1, u2) + w(v1, v2) - w(u1, v2) - w(u2, v1)
}

/// Exact integer numerator of the U-statistic given per-cell counts of two
/// samples of equal size `m`; the statistic is this divided by
/// `(m (m - 1))^2`.
fn u_numerator(c1: &[u32], c2: &[u32], m: usize) -> i128 {
    let (mut within, mut cross) = (0i128, 0i128);
    for (&a, &b) in c1.iter().zip(c2) {
        let (a, b) = (a as i128, b as i128);
        within += a * (a - 1) + b * (b - 1);
        cross += a * b;
    }
    let m = m as i128;
    m * (m - 1) * within - 2 * (m - 1) * (m - 1) * cross
}

fn u_denominator(m: usize) -> f64 {
    let mm = (m * (m - 1)) as f64;
    mm * mm
}

/// Relabels the pooled cells densely as `0..k`.
fn dense_labels(cells: impl Iterator<Item = u128>) -> (Vec<u32>, usize) {
    let raw: Vec<u128> = cells.collect();
    let mut uniq = raw.clone();
    uniq.sort_unstable();
    uniq.dedup();
    let labels = raw.iter().map(|c| uniq.binary_search(c).expect("present") as u32).collect();
    (labels, uniq.len())
}

/// Two-sample U-statistic on cell labels, computed in `O(m + cells)` from
/// cell counts.
pub fn u_statistic(s1: &DiscretizedSample, s2: &DiscretizedSample) -> Result<f64> {
    let m = s1.len();
    if s2.len() != m {
        return Err(CdetError::DimensionMismatch {
            expected: m,
            actual: s2.len(),
            context: "U-statistic sample sizes",
        });
    }
    if m < 2 {
        return Err(CdetError::precondition("U-statistic needs at least two rows per sample"));
    }
    let (labels, k) = dense_labels(s1.cells.iter().chain(&s2.cells).copied());
    let (c1, c2) = counts(&labels, m, k);
    Ok(u_numerator(&c1, &c2, m) as f64 / u_denominator(m))
}

fn counts(labels: &[u32], m: usize, k: usize) -> (Vec<u32>, Vec<u32>) {
    let mut c1 = vec![0u32; k];
    let mut c2 = vec![0u32; k];
    for &l in &labels[..m] {
        c1[l as usize] += 1;
    }
    for &l in &labels[m..] {
        c2[l as usize] += 1;
    }
    (c1, c2)
}

/// Result of one permutation test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermTestOutcome {
    pub u_stat: f64,
    pub p_value: f64,
    /// Empirical `(1 - alpha)` quantile of the permuted statistics.
    pub critical_value: f64,
    pub alpha: f64,
    pub n_permutations: usize,
    pub reject: bool,
    pub side: f64,
    pub cells_per_axis: usize,
    pub dims: usize,
    pub occupied_cells: usize,
    pub sample_size: usize,
    pub clamped_rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationConfig {
    pub alpha: f64,
    pub side: f64,
    pub n_perm: usize,
    pub seed: u64,
    #[serde(skip)]
    pub exec: ExecMode,
}

fn check_alpha_nperm(alpha: f64, n_perm: usize) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CdetError::Config(format!("alpha {alpha} outside (0, 1)")));
    }
    if n_perm == 0 || alpha * (n_perm as f64 + 1.0) < 1.0 - 1e-12 {
        return Err(CdetError::precondition(format!(
            "{n_perm} permutations cannot reach level {alpha}; need alpha (n_perm + 1) >= 1"
        )));
    }
    Ok(())
}

/// Labels of both samples under several grids, sharing the permutation draws.
struct MultiScale {
    m: usize,
    scales: Vec<(Vec<u32>, usize)>,
}

impl MultiScale {
    /// Observed numerators and, for each scale, the number of permutation
    /// numerators `>=` the observed one plus the sorted permuted statistics.
    fn run(&self, n_perm: usize, seed: u64, exec: ExecMode) -> Vec<(i128, usize, Vec<f64>)> {
        let m = self.m;
        let observed: Vec<i128> = self
            .scales
            .iter()
            .map(|(labels, k)| {
                let (c1, c2) = counts(labels, m, *k);
                u_numerator(&c1, &c2, m)
            })
            .collect();
        let per_perm: Vec<Vec<i128>> = exec.map_indices(n_perm, |b| {
            let mut rng = rng_from_seed(derive_seed(seed, b as u64));
            let mut order: Vec<u32> = (0..2 * m as u32).collect();
            order.partial_shuffle(&mut rng, m);
            self.scales
                .iter()
                .map(|(labels, k)| {
                    let mut c1 = vec![0u32; *k];
                    let mut c2 = vec![0u32; *k];
                    for &i in &order[..m] {
                        c1[labels[i as usize] as usize] += 1;
                    }
                    for &i in &order[m..] {
                        c2[labels[i as usize] as usize] += 1;
                    }
                    u_numerator(&c1, &c2, m)
                })
                .collect()
        });
        let denom = u_denominator(m);
        observed
            .iter()
            .enumerate()
            .map(|(s, &obs)| {
                let exceed = per_perm.iter().filter(|v| v[s] >= obs).count();
                let mut stats: Vec<f64> = per_perm.iter().map(|v| v[s] as f64 / denom).collect();
                stats.sort_by(f64::total_cmp);
                (obs, exceed, stats)
            })
            .collect()
    }
}

fn prepare(d_hat21: &Dataset, d22: &Dataset, sides: &[f64]) -> Result<(MultiScale, Vec<(BinGrid, usize, usize)>)> {
    d_hat21.check_dims(d22)?;
    let m = d_hat21.len();
    if d22.len() != m {
        return Err(CdetError::DimensionMismatch {
            expected: m,
            actual: d22.len(),
            context: "permutation test sample sizes",
        });
    }
    if m < 2 {
        return Err(CdetError::precondition("permutation test needs at least two rows per sample"));
    }
    let mut scales = Vec::with_capacity(sides.len());
    let mut grids = Vec::with_capacity(sides.len());
    for &side in sides {
        let grid = BinGrid::fit(&[d_hat21, d22], side)?;
        let s1 = discretize(d_hat21, &grid)?;
        let s2 = discretize(d22, &grid)?;
        let (labels, k) = dense_labels(s1.cells.iter().chain(&s2.cells).copied());
        grids.push((grid, k, s1.clamped + s2.clamped));
        scales.push((labels, k));
    }
    Ok((MultiScale { m, scales }, grids))
}

fn outcome(
    (obs, exceed, stats): (i128, usize, Vec<f64>),
    (grid, occupied, clamped): (BinGrid, usize, usize),
    alpha: f64,
    n_perm: usize,
    m: usize,
) -> PermTestOutcome {
    let p_value = (1 + exceed) as f64 / (n_perm + 1) as f64;
    let q = ((1.0 - alpha) * n_perm as f64).ceil() as usize;
    let critical_value = stats[q.clamp(1, n_perm) - 1];
    PermTestOutcome {
        u_stat: obs as f64 / u_denominator(m),
        p_value,
        critical_value,
        alpha,
        n_permutations: n_perm,
        reject: p_value <= alpha,
        side: grid.side(),
        cells_per_axis: grid.cells_per_axis(),
        dims: grid.dims(),
        occupied_cells: occupied,
        sample_size: m,
        clamped_rows: clamped,
    }
}

/// Monte Carlo permutation test of `d_hat21` against `d22` on a grid of
/// side `config.side`. The p-value is `(1 + #{U_b >= U_obs}) / (B + 1)` and
/// the test rejects when it is at most `alpha`.
pub fn permutation_test(d_hat21: &Dataset, d22: &Dataset, config: &PermutationConfig) -> Result<PermTestOutcome> {
    check_alpha_nperm(config.alpha, config.n_perm)?;
    let (multi, grids) = prepare(d_hat21, d22, &[config.side])?;
    let m = multi.m;
    let res = multi.run(config.n_perm, stream_seed(config.seed, Stream::Permutation), config.exec);
    let (r, g) = (res.into_iter().next().unwrap(), grids.into_iter().next().unwrap());
    Ok(outcome(r, g, config.alpha, config.n_perm, m))
}

/// Theory-default bin side `1 / floor(n2^{2 / (4 beta + p + d)})`.
pub fn default_side(n2: usize, p: usize, d: usize, beta: f64) -> f64 {
    let k = (n2 as f64).powf(2.0 / (4.0 * beta + (p + d) as f64)).floor().max(1.0);
    1.0 / k
}

/// Dyadic resolutions of the adaptive test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveGrid {
    pub levels: usize,
    pub sides: Vec<f64>,
}

/// `v = ceil( 2/(p+d) * log2( (n2/2) / ln ln (n2/2) ) )` and sides
/// `2^-1, ..., 2^-v`.
pub fn adaptive_grid(p: usize, d: usize, n2: usize) -> Result<AdaptiveGrid> {
    let half = n2 as f64 / 2.0;
    if half <= std::f64::consts::E {
        return Err(CdetError::precondition(format!(
            "adaptive grid needs n2 / 2 > e, got n2 = {n2}"
        )));
    }
    let inner = half.ln().ln();
    let levels = ((2.0 / (p + d) as f64) * (half / inner).log2()).ceil().max(1.0) as usize;
    let sides = (1..=levels).map(|j| 0.5f64.powi(j as i32)).collect();
    Ok(AdaptiveGrid { levels, sides })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveOutcome {
    pub levels: usize,
    /// Level used at each scale: `(alpha - delta) / levels`.
    pub level_per_scale: f64,
    pub per_scale: Vec<PermTestOutcome>,
    pub reject: bool,
    pub min_p_value: f64,
}

/// Bonferroni maximum over the dyadic grid. One permutation draw per
/// replicate is shared across all scales.
pub fn adaptive_permutation_test(
    d_hat21: &Dataset,
    d22: &Dataset,
    alpha: f64,
    delta: f64,
    n_perm: usize,
    n2: usize,
    seed: u64,
    exec: ExecMode,
) -> Result<AdaptiveOutcome> {
    if !(0.0..alpha).contains(&delta) {
        return Err(CdetError::Config(format!("delta {delta} must lie in [0, alpha)")));
    }
    let grid = adaptive_grid(d_hat21.p(), d_hat21.d(), n2)?;
    let level = (alpha - delta) / grid.levels as f64;
    check_alpha_nperm(level, n_perm)?;
    let (multi, grids) = prepare(d_hat21, d22, &grid.sides)?;
    let m = multi.m;
    let results = multi.run(n_perm, stream_seed(seed, Stream::Permutation), exec);
    let per_scale: Vec<PermTestOutcome> = results
        .into_iter()
        .zip(grids)
        .map(|(r, g)| outcome(r, g, level, n_perm, m))
        .collect();
    let reject = per_scale.iter().any(|o| o.reject);
    let min_p_value = per_scale.iter().map(|o| o.p_value).fold(1.0, f64::min);
    Ok(AdaptiveOutcome { levels: grid.levels, level_per_scale: level, per_scale, reject, min_p_value })
}

/// Splits the second sample into two random halves; with odd size one row
/// is dropped at random.
pub fn split_halves(data2: &Dataset, seed: u64) -> (Dataset, Dataset) {
    let mut rng = stream_rng(seed, Stream::Split);
    let mut parts = data2.split_equal(2, &mut rng);
    let d22 = parts.pop().unwrap();
    let d21 = parts.pop().unwrap();
    (d21, d22)
}

/// Settings shared by both permutation-based procedures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    pub alpha: f64,
    /// Bin side; `None` uses [`default_side`] with `beta`.
    pub side: Option<f64>,
    pub beta: f64,
    pub n_perm: usize,
    pub seed: u64,
    /// Slack subtracted from alpha in the adaptive test.
    pub delta: f64,
    #[serde(skip)]
    pub exec: ExecMode,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self { alpha: 0.05, side: None, beta: 2.0, n_perm: 500, seed: 0, delta: 0.0, exec: ExecMode::default() }
    }
}

/// Generator-backed test outcome with the training summary (absent for an
/// oracle generator).
#[derive(Debug, Clone, PartialEq)]
pub struct GpReport<T> {
    pub outcome: T,
    pub training: Option<TrainingSummary>,
    pub n2_used: usize,
}

fn check_second_sample(data1: &Dataset, data2: &Dataset) -> Result<()> {
    data1.check_dims(data2)?;
    if data2.len() < 4 {
        return Err(CdetError::precondition(format!("second sample needs at least 4 rows, got {}", data2.len())));
    }
    Ok(())
}

/// Split the second sample and synthesize responses at the first half's covariates.
fn synthesize<S: ConditionalSampler + ?Sized>(sampler: &S, data2: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let (d21, d22) = split_halves(data2, seed);
    let d_hat21 = mdn::generate_dataset(sampler, d21.covariates(), seed)?;
    Ok((d_hat21, d22))
}

/// Permutation test with a known (or previously trained) generator.
pub fn gp_cdet_with_sampler<S: ConditionalSampler + ?Sized>(
    sampler: &S,
    data2: &Dataset,
    config: &GpConfig,
) -> Result<PermTestOutcome> {
    check_alpha_nperm(config.alpha, config.n_perm)?;
    if data2.len() < 4 {
        return Err(CdetError::precondition(format!("second sample needs at least 4 rows, got {}", data2.len())));
    }
    let (d_hat21, d22) = synthesize(sampler, data2, config.seed)?;
    let side = config.side.unwrap_or_else(|| default_side(data2.len(), data2.p(), data2.d(), config.beta));
    permutation_test(
        &d_hat21,
        &d22,
        &PermutationConfig { alpha: config.alpha, side, n_perm: config.n_perm, seed: config.seed, exec: config.exec },
    )
}

/// Full pipeline: train the generator on `data1`, split `data2`, synthesize
/// and run the permutation test.
pub fn gp_cdet(data1: &Dataset, data2: &Dataset, mdn_spec: &MdnSpec, config: &GpConfig) -> Result<GpReport<PermTestOutcome>> {
    check_second_sample(data1, data2)?;
    check_alpha_nperm(config.alpha, config.n_perm)?;
    let (gen, training) = mdn::train(data1, mdn_spec, stream_seed(config.seed, Stream::Training))?;
    let outcome = gp_cdet_with_sampler(&gen, data2, config)?;
    Ok(GpReport { outcome, training: Some(training), n2_used: 2 * (data2.len() / 2) })
}

pub fn adaptive_gp_cdet_with_sampler<S: ConditionalSampler + ?Sized>(
    sampler: &S,
    data2: &Dataset,
    config: &GpConfig,
) -> Result<AdaptiveOutcome> {
    if data2.len() < 4 {
        return Err(CdetError::precondition(format!("second sample needs at least 4 rows, got {}", data2.len())));
    }
    let (d_hat21, d22) = synthesize(sampler, data2, config.seed)?;
    adaptive_permutation_test(
        &d_hat21,
        &d22,
        config.alpha,
        config.delta,
        config.n_perm,
        data2.len(),
        config.seed,
        config.exec,
    )
}

/// Adaptive multi-resolution variant of [`gp_cdet`].
pub fn adaptive_gp_cdet(
    data1: &Dataset,
    data2: &Dataset,
    mdn_spec: &MdnSpec,
    config: &GpConfig,
) -> Result<GpReport<AdaptiveOutcome>> {
    check_second_sample(data1, data2)?;
    adaptive_grid(data2.p(), data2.d(), data2.len())?;
    let (gen, training) = mdn::train(data1, mdn_spec, stream_seed(config.seed, Stream::Training))?;
    let outcome = adaptive_gp_cdet_with_sampler(&gen, data2, config)?;
    Ok(GpReport { outcome, training: Some(training), n2_used: 2 * (data2.len() / 2) })
}
