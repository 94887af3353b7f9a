//! Generative classification-accuracy test.
//!
//! Synthesized rows (class 1) and held-out rows (class 0) are each split in
//! half. A logistic classifier is fitted on one half of each and its error
//! rates `e1`, `e0` on the other halves give
//!
//! ```text
//! T = (e1 + e0 - 1) / sqrt(e1 (1 - e1) / n + e0 (1 - e0) / n)
//! ```
//!
//! which is rejected when `T < -z_alpha`. Under the null the classifier is
//! at chance and `e1 + e0` is close to one.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{AffineMap, Dataset};
use crate::error::{CdetError, Result};
use crate::mdn::{self, ConditionalSampler, MdnSpec, TrainingSummary};
use crate::nn::{self, Activation, FitConfig, FnnParams, FnnSpec};
use crate::rng::{derive_seed, stream_rng, stream_seed, Stream};

/// `-s r + ln(1 + e^r)`.
pub fn logistic_loss(r: f64, s: bool) -> f64 {
    // Equals softplus(-r) or softplus(r); written so neither branch cancels.
    let t = if s { -r } else { r };
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(r: f64) -> f64 {
    if r >= 0.0 {
        1.0 / (1.0 + (-r).exp())
    } else {
        let e = r.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ClassifierKind {
    /// ReLU network with the given hidden widths and a scalar output.
    Neural { hidden_widths: Vec<usize> },
    /// Linear logistic regression, fitted full-batch.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTraining {
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    /// Share of the training rows held back for early stopping (neural
    /// only). Zero monitors the training loss instead.
    pub validation_fraction: f64,
    /// Gradient-norm tolerance for the full-batch linear fit.
    pub tolerance: f64,
    /// Iteration cap for the full-batch linear fit.
    pub max_iterations: usize,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            learning_rate: 1e-3,
            batch_size: 32,
            patience: 20,
            validation_fraction: 0.0,
            tolerance: 1e-8,
            max_iterations: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    pub training: ClassifierTraining,
    /// Predict class 1 when the score is at least this value.
    pub threshold: f64,
}

impl ClassifierSpec {
    pub fn neural(hidden_widths: Vec<usize>) -> Self {
        Self { kind: ClassifierKind::Neural { hidden_widths }, training: ClassifierTraining::default(), threshold: 0.0 }
    }

    pub fn linear() -> Self {
        Self { kind: ClassifierKind::Linear, training: ClassifierTraining::default(), threshold: 0.0 }
    }
}

/// Anything that assigns a class to a `(y, x)` row.
pub trait BinaryClassifier {
    fn predict(&self, y: &[f64], x: &[f64]) -> bool;
}

/// Fitted logistic score `R(y, x)` on standardized inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    standardizer: AffineMap,
    model: FnnParams,
    pub threshold: f64,
    pub training_loss: f64,
}

impl Classifier {
    pub fn score(&self, y: &[f64], x: &[f64]) -> f64 {
        let mut joint = Vec::with_capacity(y.len() + x.len());
        joint.extend_from_slice(y);
        joint.extend_from_slice(x);
        let mut z = vec![0.0; joint.len()];
        self.standardizer.apply(&joint, &mut z);
        self.model.forward(&z).expect("dimension fixed at fit time")[0]
    }

    pub fn model(&self) -> &FnnParams {
        &self.model
    }

    /// Weights of a linear classifier on standardized inputs.
    pub fn linear_coefficients(&self) -> Option<&[f64]> {
        match self.model.layers.as_slice() {
            [only] => Some(&only.weights),
            _ => None,
        }
    }
}

impl BinaryClassifier for Classifier {
    fn predict(&self, y: &[f64], x: &[f64]) -> bool {
        self.score(y, x) >= self.threshold
    }
}

fn stacked_inputs(pos: &Dataset, neg: &Dataset) -> (Vec<f64>, Vec<bool>) {
    let dim = pos.p() + pos.d();
    let mut inputs = Vec::with_capacity((pos.len() + neg.len()) * dim);
    let mut labels = Vec::with_capacity(pos.len() + neg.len());
    let mut row = vec![0.0; dim];
    for (ds, label) in [(pos, true), (neg, false)] {
        for i in 0..ds.len() {
            ds.joint_into(i, &mut row);
            inputs.extend_from_slice(&row);
            labels.push(label);
        }
    }
    (inputs, labels)
}

/// Minimizes mean logistic loss over the pooled rows (class 1 = `train_pos`).
pub fn fit_classifier(train_pos: &Dataset, train_neg: &Dataset, spec: &ClassifierSpec, seed: u64) -> Result<Classifier> {
    train_pos.check_dims(train_neg)?;
    if train_pos.is_empty() || train_neg.is_empty() {
        return Err(CdetError::precondition("both classes need at least one training row"));
    }
    let dim = train_pos.p() + train_pos.d();
    let (raw, labels) = stacked_inputs(train_pos, train_neg);
    let standardizer = AffineMap::standardize(&raw, dim);
    let inputs = standardizer.apply_rows(&raw);
    let n = labels.len();
    let t = &spec.training;

    let (model, training_loss) = match &spec.kind {
        ClassifierKind::Neural { hidden_widths } => {
            let fnn = FnnSpec::new(dim, hidden_widths.clone(), 1, Activation::Relu, derive_seed(seed, 0xC1));
            let mut params = nn::init_params(&fnn)?;
            let mut rng = stream_rng(seed, Stream::Classifier);
            let (train_rows, val_rows) = nn::train_validation_split(n, t.validation_fraction, &mut rng);
            let loss = |row: usize, out: &[f64], grad: Option<&mut [f64]>| {
                if let Some(g) = grad {
                    g[0] = sigmoid(out[0]) - labels[row] as u8 as f64;
                }
                logistic_loss(out[0], labels[row])
            };
            let cfg = FitConfig {
                batch_size: t.batch_size,
                max_epochs: t.max_epochs,
                patience: t.patience,
                learning_rate: t.learning_rate,
            };
            let _ = nn::fit_minibatch(&mut params, &inputs, &train_rows, &val_rows, &cfg, &mut rng, &loss)?;
            let all: Vec<usize> = (0..n).collect();
            let mean = nn::mean_loss(&params, &inputs, &all, &loss, &mut nn::BatchCache::default());
            (params, mean)
        }
        ClassifierKind::Linear => fit_linear(&inputs, &labels, dim, t)?,
    };
    Ok(Classifier { standardizer, model, threshold: spec.threshold, training_loss })
}

/// Full-batch gradient descent for linear logistic regression.
fn fit_linear(inputs: &[f64], labels: &[bool], dim: usize, t: &ClassifierTraining) -> Result<(FnnParams, f64)> {
    let n = labels.len() as f64;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut gw = vec![0.0; dim];
    // Loss Hessian is bounded by (1/4)(1 + trace of the standardized covariance).
    let step = 4.0 / (1.0 + dim as f64);
    let mut loss = f64::INFINITY;
    for iter in 0..t.max_iterations {
        gw.iter_mut().for_each(|v| *v = 0.0);
        let mut gb = 0.0;
        loss = 0.0;
        for (row, &s) in inputs.chunks_exact(dim).zip(labels) {
            let r = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            loss += logistic_loss(r, s);
            let e = sigmoid(r) - s as u8 as f64;
            gb += e;
            for (g, x) in gw.iter_mut().zip(row) {
                *g += e * x;
            }
        }
        loss /= n;
        gb /= n;
        gw.iter_mut().for_each(|v| *v /= n);
        if !loss.is_finite() {
            return Err(CdetError::Divergence { epoch: iter, reason: "non-finite logistic loss".into() });
        }
        let norm = (gb * gb + gw.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if norm < t.tolerance {
            break;
        }
        b -= step * gb;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= step * g;
        }
    }
    let params = FnnParams {
        activation: Activation::Relu,
        layers: vec![nn::Layer { inputs: dim, outputs: 1, weights: w, bias: vec![b] }],
    };
    Ok((params, loss))
}

/// Misclassification rates `(e1, e0)` on the class-1 and class-0 evaluation sets.
pub fn error_rates<C: BinaryClassifier + ?Sized>(clf: &C, eval_pos: &Dataset, eval_neg: &Dataset) -> Result<(f64, f64)> {
    if eval_pos.is_empty() || eval_neg.is_empty() {
        return Err(CdetError::precondition("evaluation sets must be non-empty"));
    }
    let wrong = |ds: &Dataset, class: bool| {
        (0..ds.len()).filter(|&i| clf.predict(ds.response(i), ds.covariate(i)) != class).count() as f64
            / ds.len() as f64
    };
    Ok((wrong(eval_pos, true), wrong(eval_neg, false)))
}

/// z-statistic on the error rates with `n` evaluation rows per class. Rates
/// are clamped into `[1/(2n), 1 - 1/(2n)]` first so the variance is positive.
pub fn acc_statistic(e1: f64, e0: f64, n: usize) -> f64 {
    let n_f = n.max(1) as f64;
    let lo = 0.5 / n_f;
    let e1 = e1.clamp(lo, 1.0 - lo);
    let e0 = e0.clamp(lo, 1.0 - lo);
    (e1 + e0 - 1.0) / (e1 * (1.0 - e1) / n_f + e0 * (1.0 - e0) / n_f).sqrt()
}

/// Upper `alpha` quantile of the standard normal.
pub fn z_alpha(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CdetError::Config(format!("alpha {alpha} outside (0, 1)")));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - alpha))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccTestOutcome {
    pub e1_hat: f64,
    pub e0_hat: f64,
    pub statistic: f64,
    pub z_alpha: f64,
    pub alpha: f64,
    pub reject: bool,
    pub n_train_per_class: usize,
    pub n_eval_per_class: usize,
    pub classifier_training_loss: f64,
}

/// Quarter split of the synthesized and held-out halves.
#[derive(Debug, Clone)]
pub struct QuarterSplit {
    pub train_pos: Dataset,
    pub eval_pos: Dataset,
    pub train_neg: Dataset,
    pub eval_neg: Dataset,
}

/// Splits `data2` into halves, synthesizes class-1 responses on the first
/// half and splits both halves again. Up to three rows are dropped so that
/// all four parts have `n2 / 4` rows.
pub fn quarter_split<S: ConditionalSampler + ?Sized>(sampler: &S, data2: &Dataset, seed: u64) -> Result<QuarterSplit> {
    let mut rng = stream_rng(seed, Stream::Split);
    let mut halves = data2.split_equal(2, &mut rng);
    let d22 = halves.pop().unwrap();
    let d21 = halves.pop().unwrap();
    let d_hat21 = mdn::generate_dataset(sampler, d21.covariates(), seed)?;
    let mut pos = d_hat21.split_equal(2, &mut rng);
    let mut neg = d22.split_equal(2, &mut rng);
    Ok(QuarterSplit {
        eval_pos: pos.pop().unwrap(),
        train_pos: pos.pop().unwrap(),
        eval_neg: neg.pop().unwrap(),
        train_neg: neg.pop().unwrap(),
    })
}

/// Runs the accuracy test given the quarter split.
pub fn accuracy_test(split: &QuarterSplit, alpha: f64, spec: &ClassifierSpec, seed: u64) -> Result<AccTestOutcome> {
    let z = z_alpha(alpha)?;
    let clf = fit_classifier(&split.train_pos, &split.train_neg, spec, stream_seed(seed, Stream::Classifier))?;
    let (e1, e0) = error_rates(&clf, &split.eval_pos, &split.eval_neg)?;
    let n_eval = split.eval_pos.len();
    let statistic = acc_statistic(e1, e0, n_eval);
    Ok(AccTestOutcome {
        e1_hat: e1,
        e0_hat: e0,
        statistic,
        z_alpha: z,
        alpha,
        reject: statistic < -z,
        n_train_per_class: split.train_pos.len(),
        n_eval_per_class: n_eval,
        classifier_training_loss: clf.training_loss,
    })
}

fn check_n2(data2: &Dataset) -> Result<()> {
    if data2.len() < 8 {
        return Err(CdetError::precondition(format!("second sample needs at least 8 rows, got {}", data2.len())));
    }
    Ok(())
}

/// Accuracy test with a given generator (trained elsewhere, or the true
/// conditional law).
pub fn gca_cdet_with_sampler<S: ConditionalSampler + ?Sized>(
    sampler: &S,
    data2: &Dataset,
    alpha: f64,
    classifier: &ClassifierSpec,
    seed: u64,
) -> Result<AccTestOutcome> {
    z_alpha(alpha)?;
    check_n2(data2)?;
    if sampler.response_dim() != data2.p() || sampler.covariate_dim() != data2.d() {
        return Err(CdetError::DimensionMismatch {
            expected: sampler.response_dim() + sampler.covariate_dim(),
            actual: data2.p() + data2.d(),
            context: "generator vs second sample",
        });
    }
    let split = quarter_split(sampler, data2, seed)?;
    accuracy_test(&split, alpha, classifier, seed)
}

/// Oracle variant: the true conditional sampler replaces the trained generator.
pub fn oracle_gca_cdet<S: ConditionalSampler + ?Sized>(
    truth: &S,
    data2: &Dataset,
    alpha: f64,
    classifier: &ClassifierSpec,
    seed: u64,
) -> Result<AccTestOutcome> {
    gca_cdet_with_sampler(truth, data2, alpha, classifier, seed)
}

/// Full pipeline: train the generator on `data1`, then run the accuracy test on `data2`.
pub fn gca_cdet(
    data1: &Dataset,
    data2: &Dataset,
    alpha: f64,
    mdn_spec: &MdnSpec,
    classifier: &ClassifierSpec,
    seed: u64,
) -> Result<(AccTestOutcome, TrainingSummary)> {
    z_alpha(alpha)?;
    data1.check_dims(data2)?;
    check_n2(data2)?;
    let (gen, training) = mdn::train(data1, mdn_spec, stream_seed(seed, Stream::Training))?;
    let outcome = gca_cdet_with_sampler(&gen, data2, alpha, classifier, seed)?;
    Ok((outcome, training))
}
