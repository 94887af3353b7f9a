use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cdet::io::ColumnRoles;
use cdet::report::{self, Command, RunConfig};
use cdet::sim::{Model, Regime};
use cdet::{MethodSettings, TestMethod};

/// Two-sample conditional distribution equality tests.
#[derive(Parser, Debug)]
#[command(name = "cdet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Test whether Y|X has the same law in two CSV files.
    Test {
        /// Sample used to train the generator.
        data1: PathBuf,
        /// Sample the test is run on.
        data2: PathBuf,
        #[arg(long, default_value = "gca-nn", value_parser = parse_method)]
        method: TestMethod,
        /// Stored generator (from `train-generator`) used instead of training.
        #[arg(long)]
        generator: Option<PathBuf>,
        #[command(flatten)]
        columns: Columns,
        #[command(flatten)]
        common: Common,
    },
    /// Run repeated trials of a simulation model and print the rejection table.
    Simulate {
        /// Model number 1-7 (or M1..M7).
        #[arg(long, value_parser = parse_model)]
        model: Model,
        #[arg(long, default_value = "null", value_parser = parse_regime)]
        regime: Regime,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// gp, gp-adaptive, gca-nn, gca-llr, oracle-nn or oracle-llr.
        #[arg(long = "test", default_value = "gca-nn", value_parser = parse_method)]
        method: TestMethod,
        #[arg(long, default_value_t = 1000)]
        n1: usize,
        #[arg(long, default_value_t = 1000)]
        n2: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train a generator on one CSV file and save it as JSON to --out.
    TrainGenerator {
        data1: PathBuf,
        #[command(flatten)]
        columns: Columns,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug)]
struct Columns {
    /// Response column names.
    #[arg(long, value_delimiter = ',', required = true)]
    response: Vec<String>,
    /// Covariate column names.
    #[arg(long, value_delimiter = ',', required = true)]
    covariates: Vec<String>,
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Monte Carlo permutations for the permutation tests.
    #[arg(long)]
    n_perm: Option<usize>,
    /// Bin side in normalized units; defaults to the sample-size rule.
    #[arg(long)]
    bin_side: Option<f64>,
    /// Mixture components of the generator.
    #[arg(long)]
    g_components: Option<usize>,
    /// Generator hidden widths, e.g. 32,16.
    #[arg(long, value_delimiter = ',')]
    mdn_hidden: Option<Vec<usize>>,
    /// Classifier hidden widths, e.g. 64.
    #[arg(long, value_delimiter = ',')]
    classifier_hidden: Option<Vec<usize>>,
    /// Cap on generator training epochs.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Drop second-sample rows outside the first sample's covariate range (default).
    #[arg(long, overrides_with = "no_trim")]
    trim: bool,
    #[arg(long, overrides_with = "trim")]
    no_trim: bool,
    /// Worker threads; 0 uses all cores, 1 runs sequentially.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Report (test), table CSV (simulate) or generator JSON (train-generator).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<TestMethod, String> {
    s.parse().map_err(|e: cdet::CdetError| e.to_string())
}

fn parse_model(s: &str) -> Result<Model, String> {
    s.parse().map_err(|e: cdet::CdetError| e.to_string())
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    s.parse().map_err(|e: cdet::CdetError| e.to_string())
}

impl Common {
    fn settings(&self, base: MethodSettings) -> MethodSettings {
        let mut s = base;
        if let Some(n) = self.n_perm {
            s.n_perm = n;
        }
        s.side = self.bin_side.or(s.side);
        if let Some(g) = self.g_components {
            s.components = g;
        }
        if let Some(h) = &self.mdn_hidden {
            s.mdn_hidden = h.clone();
        }
        if let Some(h) = &self.classifier_hidden {
            s.classifier_hidden = h.clone();
        }
        if let Some(e) = self.max_epochs {
            s.mdn_training.max_epochs = e;
        }
        s
    }

    fn config(&self, command: Command, roles: Option<ColumnRoles>, base: MethodSettings) -> RunConfig {
        RunConfig {
            command,
            roles,
            alpha: self.alpha,
            seed: self.seed,
            settings: self.settings(base),
            trim: !self.no_trim,
            workers: self.workers,
            out: self.out.clone(),
        }
    }
}

fn build(cli: Cli) -> RunConfig {
    match cli.command {
        Cmd::Test { data1, data2, method, generator, columns, common } => common.config(
            Command::Test { data1, data2, method, generator },
            Some(ColumnRoles::new(columns.response, columns.covariates)),
            MethodSettings::default(),
        ),
        Cmd::Simulate { model, regime, trials, method, n1, n2, common } => {
            common.config(Command::Simulate { model, regime, n1, n2, trials, method }, None, model.settings())
        }
        Cmd::TrainGenerator { data1, columns, common } => common.config(
            Command::TrainGenerator { data1 },
            Some(ColumnRoles::new(columns.response, columns.covariates)),
            MethodSettings::default(),
        ),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let config = build(Cli::parse());
    let output = report::run(&config).context("run failed")?;
    print!("{}", output.summary()?);
    Ok(())
}
