//! Run configuration and report rendering for the command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CdetError, Result};
use crate::exec::ExecMode;
use crate::io::{self, ColumnRoles};
use crate::mdn::{self, ConditionalSampler, MdnGenerator, TrainingSummary};
use crate::method::{run_method, MethodDetail, MethodOutcome, MethodSettings, TestMethod};
use crate::rng::{stream_seed, Stream};
use crate::sim::{self, Model, Regime, SimulationSpec, TrialTable};

const HYPOTHESIS: &str = "H0: the conditional law of Y given X is the same in both samples";

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Test {
        data1: PathBuf,
        data2: PathBuf,
        method: TestMethod,
        /// Previously trained generator; skips training on `data1`.
        generator: Option<PathBuf>,
    },
    /// Uses `RunConfig::settings` as given; start from [`Model::settings`]
    /// for the model's own network sizes.
    Simulate {
        model: Model,
        regime: Regime,
        n1: usize,
        n2: usize,
        trials: usize,
        method: TestMethod,
    },
    TrainGenerator {
        data1: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    /// Required for `Test` and `TrainGenerator`.
    pub roles: Option<ColumnRoles>,
    pub alpha: f64,
    pub seed: u64,
    pub settings: MethodSettings,
    pub trim: bool,
    pub workers: usize,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CdetError::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if let Some(side) = self.settings.side {
            if !(side > 0.0 && side <= 1.0) {
                return Err(CdetError::Config(format!("bin side must lie in (0, 1], got {side}")));
            }
        }
        if self.settings.components == 0 {
            return Err(CdetError::Config("number of mixture components must be positive".into()));
        }
        match &self.command {
            Command::Test { method, .. } if method.is_oracle() => {
                Err(CdetError::Config("oracle methods are only available in simulations".into()))
            }
            Command::Test { .. } | Command::TrainGenerator { .. } => match &self.roles {
                Some(r) => r.validate(),
                None => Err(CdetError::Config("column roles are required".into())),
            },
            Command::Simulate { n1, n2, .. } if *n1 == 0 || *n2 == 0 => {
                Err(CdetError::Config("sample sizes must be positive".into()))
            }
            Command::Simulate { .. } => Ok(()),
        }
    }
}

/// Outcome of one test invocation on user data.
#[derive(Debug, Clone, PartialEq)]
pub struct TestReport {
    pub outcome: MethodOutcome,
    pub n1: usize,
    pub n2_loaded: usize,
    pub n2_used: usize,
    pub trimmed: usize,
    pub skipped_rows: (usize, usize),
    pub seed: u64,
    pub generator_source: String,
    pub timestamp: String,
}

fn push(out: &mut String, key: &str, value: impl std::fmt::Display) {
    let _ = writeln!(out, "{key}={value}");
}

fn push_training(out: &mut String, t: &TrainingSummary) {
    push(out, "generator.epochs", t.fit.epochs_run);
    push(out, "generator.best_epoch", t.fit.best_epoch);
    push(out, "generator.best_validation_nll", t.fit.best_loss);
    push(out, "generator.n_train", t.n_train);
    push(out, "generator.n_validation", t.n_validation);
    for (i, w) in t.warnings.iter().enumerate() {
        push(out, &format!("generator.warning.{i}"), w);
    }
}

impl TestReport {
    /// One `key=value` fact per line.
    pub fn to_key_value(&self) -> String {
        let o = &self.outcome;
        let mut s = String::new();
        push(&mut s, "test", o.method);
        push(&mut s, "hypothesis", HYPOTHESIS);
        push(&mut s, "alpha", o.alpha);
        match &o.detail {
            MethodDetail::Permutation(p) => {
                push(&mut s, "statistic.u", p.u_stat);
                push(&mut s, "p_value", p.p_value);
                push(&mut s, "critical_value", p.critical_value);
                push(&mut s, "rule", "reject iff p_value <= alpha");
                push(&mut s, "n_perm", p.n_permutations);
                push(&mut s, "bin_side", p.side);
                push(&mut s, "cells_per_axis", p.cells_per_axis);
                push(&mut s, "occupied_cells", p.occupied_cells);
                push(&mut s, "clamped_rows", p.clamped_rows);
            }
            MethodDetail::Adaptive(a) => {
                push(&mut s, "levels", a.levels);
                push(&mut s, "level_per_scale", a.level_per_scale);
                push(&mut s, "p_value.min", a.min_p_value);
                push(&mut s, "rule", "reject iff some scale has p_value <= level_per_scale");
                for (j, p) in a.per_scale.iter().enumerate() {
                    push(&mut s, &format!("scale.{}.bin_side", j + 1), p.side);
                    push(&mut s, &format!("scale.{}.statistic.u", j + 1), p.u_stat);
                    push(&mut s, &format!("scale.{}.p_value", j + 1), p.p_value);
                    push(&mut s, &format!("scale.{}.reject", j + 1), p.reject);
                }
            }
            MethodDetail::Accuracy(a) => {
                push(&mut s, "statistic.z", a.statistic);
                push(&mut s, "error_rate.generated", a.e1_hat);
                push(&mut s, "error_rate.observed", a.e0_hat);
                push(&mut s, "z_alpha", a.z_alpha);
                push(&mut s, "rule", "reject iff statistic.z < -z_alpha");
                push(&mut s, "classifier.n_train_per_class", a.n_train_per_class);
                push(&mut s, "classifier.n_eval_per_class", a.n_eval_per_class);
                push(&mut s, "classifier.training_loss", a.classifier_training_loss);
            }
        }
        push(&mut s, "decision", if o.reject { "reject" } else { "fail-to-reject" });
        push(&mut s, "n1", self.n1);
        push(&mut s, "n2.loaded", self.n2_loaded);
        push(&mut s, "n2.trimmed", self.trimmed);
        push(&mut s, "n2.used", self.n2_used);
        push(&mut s, "rows_skipped.data1", self.skipped_rows.0);
        push(&mut s, "rows_skipped.data2", self.skipped_rows.1);
        push(&mut s, "generator.source", &self.generator_source);
        if let Some(t) = &o.training {
            push_training(&mut s, t);
        }
        push(&mut s, "seed", self.seed);
        push(&mut s, "timestamp", &self.timestamp);
        s
    }

    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        let o = &self.outcome;
        let detail = match o.p_value() {
            Some(p) => format!("p-value {p:.4}"),
            None => format!("z {:.4}", o.statistic()),
        };
        format!(
            "{:<12} n1={:<7} n2={:<7} {:<20} alpha={:<6} decision: {}\n",
            o.method.name(),
            self.n1,
            self.n2_used,
            detail,
            o.alpha,
            if o.reject { "reject" } else { "fail to reject" }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorReport {
    pub training: TrainingSummary,
    pub n1: usize,
    pub seed: u64,
    pub path: Option<PathBuf>,
    pub timestamp: String,
}

impl GeneratorReport {
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        push(&mut s, "n1", self.n1);
        push_training(&mut s, &self.training);
        if let Some(p) = &self.path {
            push(&mut s, "generator.path", p.display());
        }
        push(&mut s, "seed", self.seed);
        push(&mut s, "timestamp", &self.timestamp);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutput {
    Test(TestReport),
    Simulation(TrialTable),
    Generator(GeneratorReport),
}

impl RunOutput {
    /// Text for standard output.
    pub fn summary(&self) -> Result<String> {
        Ok(match self {
            RunOutput::Test(r) => format!("{}\n{}", r.summary(), r.to_key_value()),
            RunOutput::Simulation(t) => t.to_text(),
            RunOutput::Generator(g) => g.to_key_value(),
        })
    }
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|source| CdetError::Io { path: path.display().to_string(), source })
}

/// Executes a validated configuration and writes the report to `config.out`
/// when set.
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let output = match &config.command {
        Command::Test { data1, data2, method, generator } => run_test(config, data1, data2, *method, generator.as_deref())?,
        Command::Simulate { model, regime, n1, n2, trials, method } => {
            let mut spec = SimulationSpec::new(*model, *regime, *n1, *n2, *method).with_trials(*trials).with_seed(config.seed);
            spec.alpha = config.alpha;
            spec.trim = config.trim;
            spec.workers = config.workers;
            spec.settings = config.settings.clone();
            RunOutput::Simulation(sim::run_trials(&spec)?)
        }
        Command::TrainGenerator { data1 } => {
            let roles = config.roles.as_ref().expect("validated");
            let table = io::load_table(data1, roles)?;
            let spec = config.settings.mdn_spec(table.dataset.p(), table.dataset.d());
            let (gen, training) = mdn::train(&table.dataset, &spec, stream_seed(config.seed, Stream::Training))?;
            if let Some(out) = &config.out {
                io::save_generator(out, &gen)?;
            }
            RunOutput::Generator(GeneratorReport {
                training,
                n1: table.dataset.len(),
                seed: config.seed,
                path: config.out.clone(),
                timestamp: timestamp(),
            })
        }
    };
    if let Some(out) = &config.out {
        match &output {
            RunOutput::Test(r) => write_text(out, &r.to_key_value())?,
            RunOutput::Simulation(t) => {
                write_text(out, &t.to_csv()?)?;
                let mut ledger = out.clone().into_os_string();
                ledger.push(".seeds.csv");
                write_text(Path::new(&ledger), &t.seed_ledger_csv()?)?;
            }
            RunOutput::Generator(_) => {}
        }
    }
    Ok(output)
}

fn run_test(config: &RunConfig, data1: &Path, data2: &Path, method: TestMethod, generator: Option<&Path>) -> Result<RunOutput> {
    let roles = config.roles.as_ref().expect("validated");
    let t1 = io::load_table(data1, roles)?;
    let t2 = io::load_table(data2, roles)?;
    let n2_loaded = t2.dataset.len();
    let (d2, trimmed) = if config.trim { sim::trim_support(&t2.dataset, &t1.dataset)? } else { (t2.dataset.clone(), 0) };
    let loaded: Option<MdnGenerator> = generator.map(io::load_generator).transpose()?;
    if let Some(g) = &loaded {
        if g.response_dim() != d2.p() || g.covariate_dim() != d2.d() {
            return Err(CdetError::DimensionMismatch {
                expected: g.response_dim() + g.covariate_dim(),
                actual: d2.p() + d2.d(),
                context: "stored generator vs data columns",
            });
        }
    }
    let sampler = loaded.as_ref().map(|g| g as &dyn ConditionalSampler);
    let exec = if config.workers == 1 { ExecMode::Sequential } else { ExecMode::Parallel };
    let outcome = exec.install(config.workers, || {
        run_method(method, Some(&t1.dataset), &d2, config.alpha, &config.settings, sampler, config.seed, exec)
    })?;
    Ok(RunOutput::Test(TestReport {
        outcome,
        n1: t1.dataset.len(),
        n2_loaded,
        n2_used: d2.len(),
        trimmed,
        skipped_rows: (t1.skipped_rows.len(), t2.skipped_rows.len()),
        seed: config.seed,
        generator_source: generator.map_or_else(|| "trained on data1".to_string(), |p| p.display().to_string()),
        timestamp: timestamp(),
    }))
}
