//! Dispatch over the available tests with one set of hyperparameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CdetError, Result};
use crate::exec::ExecMode;
use crate::gca::{self, AccTestOutcome, ClassifierSpec, ClassifierTraining};
use crate::gp::{self, AdaptiveOutcome, GpConfig, PermTestOutcome};
use crate::mdn::{self, ConditionalSampler, MdnSpec, MdnTraining, TrainingSummary};
use crate::rng::{stream_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TestMethod {
    /// Permutation U-statistic test at one bin side.
    Gp,
    /// Bonferroni maximum of permutation tests over dyadic bin sides.
    GpAdaptive,
    /// Accuracy test with a neural classifier.
    GcaNn,
    /// Accuracy test with linear logistic regression.
    GcaLlr,
    /// Accuracy test with the true conditional law, neural classifier.
    OracleNn,
    /// Accuracy test with the true conditional law, linear classifier.
    OracleLlr,
}

impl TestMethod {
    pub const ALL: [TestMethod; 6] = [
        TestMethod::Gp,
        TestMethod::GpAdaptive,
        TestMethod::GcaNn,
        TestMethod::GcaLlr,
        TestMethod::OracleNn,
        TestMethod::OracleLlr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TestMethod::Gp => "gp",
            TestMethod::GpAdaptive => "gp-adaptive",
            TestMethod::GcaNn => "gca-nn",
            TestMethod::GcaLlr => "gca-llr",
            TestMethod::OracleNn => "oracle-nn",
            TestMethod::OracleLlr => "oracle-llr",
        }
    }

    pub fn is_oracle(self) -> bool {
        matches!(self, TestMethod::OracleNn | TestMethod::OracleLlr)
    }

    pub fn uses_neural_classifier(self) -> bool {
        matches!(self, TestMethod::GcaNn | TestMethod::OracleNn)
    }
}

impl fmt::Display for TestMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TestMethod {
    type Err = CdetError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gp" | "gp-cdet" => TestMethod::Gp,
            "gp-adaptive" | "adaptive-gp-cdet" => TestMethod::GpAdaptive,
            "gca-nn" | "gca-cdet-nn" => TestMethod::GcaNn,
            "gca-llr" | "gca-cdet-llr" => TestMethod::GcaLlr,
            "oracle-nn" => TestMethod::OracleNn,
            "oracle-llr" => TestMethod::OracleLlr,
            other => return Err(CdetError::Config(format!("unknown test method `{other}`"))),
        })
    }
}

/// Hyperparameters for every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSettings {
    pub mdn_hidden: Vec<usize>,
    pub components: usize,
    pub sigma_floor: f64,
    pub mdn_training: MdnTraining,
    pub classifier_hidden: Vec<usize>,
    pub classifier_training: ClassifierTraining,
    pub threshold: f64,
    pub n_perm: usize,
    /// Bin side for the single-scale permutation test; `None` for the default rule.
    pub side: Option<f64>,
    pub beta: f64,
    pub delta: f64,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            mdn_hidden: vec![32, 16],
            components: 2,
            sigma_floor: MdnSpec::DEFAULT_SIGMA_FLOOR,
            mdn_training: MdnTraining::default(),
            classifier_hidden: vec![32],
            classifier_training: ClassifierTraining::default(),
            threshold: 0.0,
            n_perm: 500,
            side: None,
            beta: 2.0,
            delta: 0.0,
        }
    }
}

impl MethodSettings {
    pub fn mdn_spec(&self, p: usize, d: usize) -> MdnSpec {
        let mut spec = MdnSpec::new(p, d, self.components, self.mdn_hidden.clone());
        spec.sigma_floor = self.sigma_floor;
        spec.training = self.mdn_training.clone();
        spec
    }

    pub fn classifier_spec(&self, method: TestMethod) -> ClassifierSpec {
        let mut spec = if method.uses_neural_classifier() {
            ClassifierSpec::neural(self.classifier_hidden.clone())
        } else {
            ClassifierSpec::linear()
        };
        spec.training = self.classifier_training.clone();
        spec.threshold = self.threshold;
        spec
    }

    fn gp_config(&self, alpha: f64, seed: u64, exec: ExecMode) -> GpConfig {
        GpConfig { alpha, side: self.side, beta: self.beta, n_perm: self.n_perm, seed, delta: self.delta, exec }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MethodDetail {
    Permutation(PermTestOutcome),
    Adaptive(AdaptiveOutcome),
    Accuracy(AccTestOutcome),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub method: TestMethod,
    pub alpha: f64,
    pub reject: bool,
    pub detail: MethodDetail,
    pub training: Option<TrainingSummary>,
}

impl MethodOutcome {
    /// Headline statistic: U for permutation tests (smallest-p scale for the
    /// adaptive test), z for accuracy tests.
    pub fn statistic(&self) -> f64 {
        match &self.detail {
            MethodDetail::Permutation(o) => o.u_stat,
            MethodDetail::Adaptive(o) => o
                .per_scale
                .iter()
                .min_by(|a, b| a.p_value.total_cmp(&b.p_value))
                .map_or(f64::NAN, |o| o.u_stat),
            MethodDetail::Accuracy(o) => o.statistic,
        }
    }

    pub fn p_value(&self) -> Option<f64> {
        match &self.detail {
            MethodDetail::Permutation(o) => Some(o.p_value),
            MethodDetail::Adaptive(o) => Some(o.min_p_value),
            MethodDetail::Accuracy(_) => None,
        }
    }
}

/// Runs `method`. Oracle methods need `truth`; the others train a generator
/// on `data1` unless `generator` supplies one.
pub fn run_method(
    method: TestMethod,
    data1: Option<&Dataset>,
    data2: &Dataset,
    alpha: f64,
    settings: &MethodSettings,
    sampler: Option<&dyn ConditionalSampler>,
    seed: u64,
    exec: ExecMode,
) -> Result<MethodOutcome> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CdetError::Config(format!("alpha {alpha} outside (0, 1)")));
    }
    let trained;
    let mut training = None;
    let sampler: &dyn ConditionalSampler = match (sampler, method.is_oracle()) {
        (Some(s), _) => s,
        (None, true) => {
            return Err(CdetError::Config(format!("{method} needs the true conditional distribution")))
        }
        (None, false) => {
            let data1 = data1.ok_or_else(|| CdetError::Config("first sample required to train a generator".into()))?;
            data1.check_dims(data2)?;
            let spec = settings.mdn_spec(data1.p(), data1.d());
            let (gen, summary) = mdn::train(data1, &spec, stream_seed(seed, Stream::Training))?;
            trained = gen;
            training = Some(summary);
            &trained
        }
    };
    let (reject, detail) = match method {
        TestMethod::Gp => {
            let o = gp::gp_cdet_with_sampler(sampler, data2, &settings.gp_config(alpha, seed, exec))?;
            (o.reject, MethodDetail::Permutation(o))
        }
        TestMethod::GpAdaptive => {
            let o = gp::adaptive_gp_cdet_with_sampler(sampler, data2, &settings.gp_config(alpha, seed, exec))?;
            (o.reject, MethodDetail::Adaptive(o))
        }
        _ => {
            let spec = settings.classifier_spec(method);
            let o = gca::gca_cdet_with_sampler(sampler, data2, alpha, &spec, seed)?;
            (o.reject, MethodDetail::Accuracy(o))
        }
    };
    Ok(MethodOutcome { method, alpha, reject, detail, training })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in TestMethod::ALL {
            assert_eq!(m.name().parse::<TestMethod>().unwrap(), m);
        }
        assert_eq!("gca-cdet-nn".parse::<TestMethod>().unwrap(), TestMethod::GcaNn);
        assert!("nope".parse::<TestMethod>().is_err());
    }

    #[test]
    fn oracle_requires_truth() {
        let d = Dataset::new(1, 1, vec![0.0; 8], vec![0.0; 8]).unwrap();
        let r = run_method(TestMethod::OracleNn, None, &d, 0.05, &MethodSettings::default(), None, 0, ExecMode::Sequential);
        assert!(matches!(r, Err(CdetError::Config(_))));
    }
}
