//! Simulation models, repeated trials and rejection-rate tables.

use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng as _;
use rand::seq::index::sample as sample_indices;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CdetError, Result};
use crate::exec::ExecMode;
use crate::mdn::{ConditionalSampler, MdnTraining};
use crate::method::{run_method, MethodOutcome, MethodSettings, TestMethod};
use crate::rng::{derive_seed, stream_rng, Rng, Stream};

pub const BETA: [f64; 5] = [1.0, -1.0, 1.0, -1.0, 1.0];
pub const M1_MEAN_SHIFT: [f64; 5] = [1.0, 1.0, -1.0, -1.0, 0.0];
pub const M7_NOISE_SD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Model {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    M7,
}

impl Model {
    pub const ALL: [Model; 7] = [Model::M1, Model::M2, Model::M3, Model::M4, Model::M5, Model::M6, Model::M7];

    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn p(self) -> usize {
        if self == Model::M7 { 2 } else { 1 }
    }

    pub fn d(self) -> usize {
        match self {
            Model::M4 | Model::M5 => 10,
            Model::M6 => 100,
            _ => 5,
        }
    }

    /// Intercept of the second sample under the alternative.
    pub fn alternative_shift(self) -> f64 {
        if self == Model::M6 { 1.0 } else { 0.5 }
    }

    pub fn mdn_hidden(self) -> Vec<usize> {
        match self {
            Model::M1 | Model::M2 | Model::M7 => vec![8, 4],
            Model::M3 | Model::M4 => vec![32, 16],
            Model::M5 => vec![64, 32],
            Model::M6 => vec![1024, 512],
        }
    }

    pub fn classifier_hidden(self) -> Vec<usize> {
        match self {
            Model::M3 | Model::M6 => vec![64],
            Model::M4 => vec![512],
            _ => vec![32],
        }
    }

    pub fn components(self) -> usize {
        if self == Model::M5 { 8 } else { 2 }
    }

    /// Method settings with this model's network sizes.
    pub fn settings(self) -> MethodSettings {
        MethodSettings {
            mdn_hidden: self.mdn_hidden(),
            components: self.components(),
            classifier_hidden: self.classifier_hidden(),
            n_perm: 300,
            ..MethodSettings::default()
        }
    }

    /// True conditional law of the response with intercept `intercept`.
    pub fn sampler(self, intercept: f64) -> ModelSampler {
        ModelSampler { model: self, intercept }
    }

    /// Noise-free part of the response (without the intercept), written to `out`.
    /// For the bivariate model this includes the conditional mean of the
    /// `u`-dependent term.
    pub fn conditional_mean(self, x: &[f64], out: &mut [f64]) {
        match self {
            Model::M7 => {
                let lin = linear(x);
                out[0] = lin - 1.0 / (4.0 * PI);
                out[1] = lin;
            }
            _ => out[0] = self.signal(x),
        }
    }

    fn signal(self, x: &[f64]) -> f64 {
        match self {
            Model::M1 | Model::M2 | Model::M7 => linear(x),
            Model::M3 => (x[0] / 2.0 + x[1] / 2.0).exp() - x[2] * (x[3] + x[4]).sin(),
            Model::M4 | Model::M6 => x[0] * x[0] + (x[1] + x[2] / 3.0).exp() + x[3] - x[4],
            Model::M5 => (0..5)
                .map(|j| {
                    let s = x[2 * j] * x[2 * j] + x[2 * j + 1] * x[2 * j + 1];
                    BETA[j] * s * s.sin()
                })
                .sum(),
        }
    }

    fn noise_scale(self, x: &[f64]) -> f64 {
        match self {
            Model::M4 | Model::M6 => 0.5 + x[5] * x[5] / 2.0 + x[6] * x[6] / 2.0,
            _ => 1.0,
        }
    }

    /// Draws one response given `x`.
    pub fn draw_response(self, x: &[f64], intercept: f64, rng: &mut Rng, out: &mut [f64]) {
        if self == Model::M7 {
            let u = rng.sample(Uniform::new(0.0, 2.0 * PI).unwrap());
            let lin = intercept + linear(x);
            let w = u / (2.0 * PI);
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            out[0] = lin + w * (2.0 * u).sin() + M7_NOISE_SD * e1;
            out[1] = lin + w * (2.0 * u).cos() + M7_NOISE_SD * e2;
        } else {
            let e: f64 = rng.sample(StandardNormal);
            out[0] = intercept + self.signal(x) + self.noise_scale(x) * e;
        }
    }

    /// Draws a covariate vector for the first (`second = false`) or second sample.
    pub fn draw_covariates(self, second: bool, rng: &mut Rng, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.d());
        if !second {
            for v in out.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            return;
        }
        match self {
            Model::M1 => {
                for (v, m) in out.iter_mut().zip(M1_MEAN_SHIFT) {
                    *v = m + rng.sample::<f64, _>(StandardNormal);
                }
            }
            Model::M5 => {
                let radius = Uniform::new_inclusive(0.5, 1.0).unwrap();
                let angle = Uniform::new(0.0, 2.0 * PI).unwrap();
                for pair in out.chunks_exact_mut(2) {
                    let r = radius.sample(rng);
                    let u = angle.sample(rng);
                    pair[0] = r * u.sin();
                    pair[1] = r * u.cos();
                }
            }
            _ => {
                let magnitude = Uniform::new_inclusive(0.5, 1.0).unwrap();
                for v in out.iter_mut() {
                    let m = magnitude.sample(rng);
                    *v = if rng.random::<bool>() { m } else { -m };
                }
            }
        }
    }
}

fn linear(x: &[f64]) -> f64 {
    x.iter().zip(BETA).map(|(a, b)| a * b).sum()
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.number())
    }
}

impl FromStr for Model {
    type Err = CdetError;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s.trim_start_matches(['M', 'm']);
        match digits.parse::<usize>() {
            Ok(k @ 1..=7) => Ok(Model::ALL[k - 1]),
            _ => Err(CdetError::Config(format!("unknown model `{s}` (expected M1..M7)"))),
        }
    }
}

/// True conditional law `Y | X` of a simulation model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSampler {
    pub model: Model,
    pub intercept: f64,
}

impl ConditionalSampler for ModelSampler {
    fn response_dim(&self) -> usize {
        self.model.p()
    }

    fn covariate_dim(&self) -> usize {
        self.model.d()
    }

    fn sample_into(&self, x: &[f64], rng: &mut Rng, out: &mut [f64]) {
        self.model.draw_response(x, self.intercept, rng, out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    Null,
    Alternative,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Null => "null",
            Regime::Alternative => "alternative",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = CdetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "null" | "h0" => Ok(Regime::Null),
            "alternative" | "alt" | "h1" => Ok(Regime::Alternative),
            _ => Err(CdetError::Config(format!("unknown regime `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub model: Model,
    pub regime: Regime,
    pub n1: usize,
    pub n2: usize,
    pub base_seed: u64,
    pub trials: usize,
    pub method: TestMethod,
    pub alpha: f64,
    /// Drop second-sample rows outside the first sample's covariate box.
    pub trim: bool,
    pub settings: MethodSettings,
    /// Fan-out over trials.
    pub exec: ExecMode,
    /// Worker threads for `exec`; 0 uses the global pool.
    pub workers: usize,
}

impl SimulationSpec {
    /// Defaults: 100 trials, alpha 0.05, trimming on, the model's network sizes.
    pub fn new(model: Model, regime: Regime, n1: usize, n2: usize, method: TestMethod) -> Self {
        Self {
            model,
            regime,
            n1,
            n2,
            base_seed: 0,
            trials: 100,
            method,
            alpha: 0.05,
            trim: true,
            settings: model.settings(),
            exec: ExecMode::default(),
            workers: 0,
        }
    }

    pub fn with_trials(mut self, trials: usize) -> Self {
        self.trials = trials;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.base_seed = seed;
        self
    }

    pub fn with_exec(mut self, exec: ExecMode) -> Self {
        self.exec = exec;
        self
    }

    pub fn second_intercept(&self) -> f64 {
        match self.regime {
            Regime::Null => 0.0,
            Regime::Alternative => self.model.alternative_shift(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 == 0 || self.n2 == 0 {
            return Err(CdetError::InvalidSpec("sample sizes must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CdetError::InvalidSpec(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !self.method.is_oracle() {
            self.settings.mdn_spec(self.model.p(), self.model.d()).validate()?;
        }
        Ok(())
    }

    fn label(&self) -> String {
        format!("{}/{}/{}", self.model, self.regime, self.method)
    }
}

/// Draws both samples for one trial. Covariates and noise come from separate
/// streams, so the regime changes nothing but the second intercept.
pub fn generate_model(spec: &SimulationSpec, trial_seed: u64) -> (Dataset, Dataset) {
    let model = spec.model;
    let mut cov_rng = stream_rng(trial_seed, Stream::Covariates);
    let mut noise_rng = stream_rng(trial_seed, Stream::Noise);
    let draw = |n: usize, second: bool, intercept: f64, cov_rng: &mut Rng, noise_rng: &mut Rng| {
        let (p, d) = (model.p(), model.d());
        let mut y = vec![0.0; n * p];
        let mut x = vec![0.0; n * d];
        for (yi, xi) in y.chunks_exact_mut(p).zip(x.chunks_exact_mut(d)) {
            model.draw_covariates(second, cov_rng, xi);
            model.draw_response(xi, intercept, noise_rng, yi);
        }
        Dataset::new(p, d, y, x).expect("generated rows have consistent dimensions")
    };
    let data1 = draw(spec.n1, false, 0.0, &mut cov_rng, &mut noise_rng);
    let data2 = draw(spec.n2, true, spec.second_intercept(), &mut cov_rng, &mut noise_rng);
    (data1, data2)
}

/// Drops rows of `data2` whose covariates leave the bounding box of
/// `data1`'s covariates. Returns the kept rows and the number dropped.
pub fn trim_support(data2: &Dataset, data1: &Dataset) -> Result<(Dataset, usize)> {
    data1.check_dims(data2)?;
    let d = data1.d();
    if data1.is_empty() {
        return Err(CdetError::precondition("first sample is empty; no support to trim against"));
    }
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for x in data1.covariates().chunks_exact(d) {
        for j in 0..d {
            lo[j] = lo[j].min(x[j]);
            hi[j] = hi[j].max(x[j]);
        }
    }
    let keep: Vec<usize> = (0..data2.len())
        .filter(|&i| data2.covariate(i).iter().enumerate().all(|(j, &v)| v >= lo[j] && v <= hi[j]))
        .collect();
    if keep.is_empty() && !data2.is_empty() {
        return Err(CdetError::AllRowsTrimmed);
    }
    let dropped = data2.len() - keep.len();
    Ok((data2.select(&keep), dropped))
}

/// One trial of a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub reject: Option<bool>,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub n2_used: usize,
    pub dropped: usize,
    pub error: Option<String>,
}

impl TrialRecord {
    fn from_result(trial: usize, seed: u64, n2_used: usize, dropped: usize, res: Result<MethodOutcome>) -> Self {
        let mut rec = TrialRecord { trial, seed, reject: None, statistic: None, p_value: None, n2_used, dropped, error: None };
        match res {
            Ok(o) => {
                rec.reject = Some(o.reject);
                rec.statistic = Some(o.statistic());
                rec.p_value = o.p_value();
            }
            Err(e) => rec.error = Some(e.to_string()),
        }
        rec
    }
}

/// Aggregate of one configuration. Failed trials are counted and left out of
/// the frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub label: String,
    pub method: TestMethod,
    pub n1: usize,
    pub n2: usize,
    pub alpha: f64,
    pub requested: usize,
    pub rejections: usize,
    pub completed: usize,
    pub failures: usize,
    pub wall_clock_secs: f64,
    pub base_seed: u64,
    pub records: Vec<TrialRecord>,
}

impl TrialSummary {
    fn from_records(
        label: String,
        method: TestMethod,
        (n1, n2): (usize, usize),
        alpha: f64,
        base_seed: u64,
        records: Vec<TrialRecord>,
        wall_clock_secs: f64,
    ) -> Self {
        let rejections = records.iter().filter(|r| r.reject == Some(true)).count();
        let completed = records.iter().filter(|r| r.reject.is_some()).count();
        let failures = records.len() - completed;
        if failures > 0 {
            log::warn!("{label}: {failures} of {} trials failed and were excluded", records.len());
        }
        Self {
            label,
            method,
            n1,
            n2,
            alpha,
            requested: records.len(),
            rejections,
            completed,
            failures,
            wall_clock_secs,
            base_seed,
            records,
        }
    }

    /// Rejections over completed trials; `None` when nothing completed.
    pub fn frequency(&self) -> Option<f64> {
        (self.completed > 0).then(|| self.rejections as f64 / self.completed as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialTable {
    pub rows: Vec<TrialSummary>,
}

const CSV_HEADER: [&str; 11] =
    ["config", "method", "n1", "n2", "alpha", "trials", "completed", "failures", "rejections", "frequency", "wall_clock_s"];

impl TrialTable {
    pub fn push(&mut self, row: TrialSummary) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: TrialTable) {
        self.rows.extend(other.rows);
    }

    /// Column-aligned plain text.
    pub fn to_text(&self) -> String {
        let cells: Vec<[String; 11]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    r.method.to_string(),
                    r.n1.to_string(),
                    r.n2.to_string(),
                    format!("{}", r.alpha),
                    r.requested.to_string(),
                    r.completed.to_string(),
                    r.failures.to_string(),
                    r.rejections.to_string(),
                    r.frequency().map_or_else(|| "NA".to_string(), |f| format!("{f:.3}")),
                    format!("{:.2}", r.wall_clock_secs),
                ]
            })
            .collect();
        let mut widths = CSV_HEADER.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let mut line = |fields: &[&str]| {
            let parts: Vec<String> = fields.iter().zip(widths).map(|(f, w)| format!("{f:>w$}")).collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&CSV_HEADER);
        for row in &cells {
            line(&row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                r.method.to_string(),
                r.n1.to_string(),
                r.n2.to_string(),
                r.alpha.to_string(),
                r.requested.to_string(),
                r.completed.to_string(),
                r.failures.to_string(),
                r.rejections.to_string(),
                r.frequency().map_or_else(|| "NA".to_string(), |f| f.to_string()),
                r.wall_clock_secs.to_string(),
            ])?;
        }
        finish_csv(w)
    }

    /// Per-trial seeds and outcomes, enough to replay any single trial.
    pub fn seed_ledger_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["config", "base_seed", "trial", "trial_seed", "n2_used", "dropped", "reject", "statistic", "p_value", "error"])?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for r in &self.rows {
            for t in &r.records {
                w.write_record([
                    r.label.clone(),
                    r.base_seed.to_string(),
                    t.trial.to_string(),
                    t.seed.to_string(),
                    t.n2_used.to_string(),
                    t.dropped.to_string(),
                    t.reject.map_or_else(String::new, |b| b.to_string()),
                    opt(t.statistic),
                    opt(t.p_value),
                    t.error.clone().unwrap_or_default(),
                ])?;
            }
        }
        finish_csv(w)
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| CdetError::Config(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Seed of trial `t` under base seed `base`.
pub fn trial_seed(base: u64, t: usize) -> u64 {
    derive_seed(base, t as u64)
}

fn run_one(spec: &SimulationSpec, t: usize) -> TrialRecord {
    let seed = trial_seed(spec.base_seed, t);
    let (data1, mut data2) = generate_model(spec, seed);
    let mut dropped = 0;
    if spec.trim {
        match trim_support(&data2, &data1) {
            Ok((kept, k)) => {
                data2 = kept;
                dropped = k;
            }
            Err(e) => return TrialRecord::from_result(t, seed, 0, data2.len(), Err(e)),
        }
    }
    let truth = spec.model.sampler(0.0);
    let sampler = spec.method.is_oracle().then_some(&truth as &dyn ConditionalSampler);
    let res = run_method(spec.method, Some(&data1), &data2, spec.alpha, &spec.settings, sampler, seed, ExecMode::Sequential);
    TrialRecord::from_result(t, seed, data2.len(), dropped, res)
}

/// Runs `spec.trials` independent trials. Trials fan out according to
/// `spec.exec`; each trial is single-threaded and owns its random streams.
pub fn run_trials(spec: &SimulationSpec) -> Result<TrialTable> {
    spec.validate()?;
    let start = Instant::now();
    let records = spec.exec.install(spec.workers, || spec.exec.map_indices(spec.trials, |t| run_one(spec, t)));
    let summary = TrialSummary::from_records(
        spec.label(),
        spec.method,
        (spec.n1, spec.n2),
        spec.alpha,
        spec.base_seed,
        records,
        start.elapsed().as_secs_f64(),
    );
    Ok(TrialTable { rows: vec![summary] })
}

/// Settings for [`real_data_split_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct SplitExperiment {
    pub n1: usize,
    pub n2: usize,
    /// Added to every response of the second subsample.
    pub shift: f64,
    pub trials: usize,
    pub method: TestMethod,
    pub alpha: f64,
    pub seed: u64,
    pub settings: MethodSettings,
    pub exec: ExecMode,
    pub workers: usize,
}

impl SplitExperiment {
    pub fn new(n1: usize, n2: usize, shift: f64, method: TestMethod) -> Self {
        Self {
            n1,
            n2,
            shift,
            trials: 100,
            method,
            alpha: 0.05,
            seed: 0,
            settings: MethodSettings { n_perm: 300, mdn_training: MdnTraining::default(), ..MethodSettings::default() },
            exec: ExecMode::default(),
            workers: 0,
        }
    }
}

/// Draws disjoint random subsamples of sizes `n1` and `n2` from `dataset`,
/// shifts the second one's responses and runs the test, `trials` times.
pub fn real_data_split_experiment(dataset: &Dataset, cfg: &SplitExperiment) -> Result<TrialTable> {
    if cfg.method.is_oracle() {
        return Err(CdetError::Config("oracle methods need a known conditional law".into()));
    }
    if cfg.n1 == 0 || cfg.n2 == 0 {
        return Err(CdetError::InvalidSpec("subsample sizes must be positive".into()));
    }
    if cfg.n1 + cfg.n2 > dataset.len() {
        return Err(CdetError::precondition(format!(
            "n1 + n2 = {} exceeds the {} available rows",
            cfg.n1 + cfg.n2,
            dataset.len()
        )));
    }
    let start = Instant::now();
    let run = |t: usize| {
        let seed = trial_seed(cfg.seed, t);
        let mut rng = stream_rng(seed, Stream::Split);
        let rows = sample_indices(&mut rng, dataset.len(), cfg.n1 + cfg.n2).into_vec();
        let data1 = dataset.select(&rows[..cfg.n1]);
        let mut data2 = dataset.select(&rows[cfg.n1..]);
        data2.shift_responses(cfg.shift);
        let res = run_method(cfg.method, Some(&data1), &data2, cfg.alpha, &cfg.settings, None, seed, ExecMode::Sequential);
        TrialRecord::from_result(t, seed, data2.len(), 0, res)
    };
    let records = cfg.exec.install(cfg.workers, || cfg.exec.map_indices(cfg.trials, run));
    let label = format!("split/shift={}/{}", cfg.shift, cfg.method);
    let summary =
        TrialSummary::from_records(label, cfg.method, (cfg.n1, cfg.n2), cfg.alpha, cfg.seed, records, start.elapsed().as_secs_f64());
    Ok(TrialTable { rows: vec![summary] })
}
