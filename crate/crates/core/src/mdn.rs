//! Gaussian mixture density network used as the conditional generator.
//!
//! A shared feedforward backbone maps a covariate vector `x` to
//! `G (p + 2)` raw outputs: `G` mixing logits, `G p` component means and
//! `G` raw scales. The head turns them into an isotropic Gaussian mixture
//!
//! ```text
//! f(y | x) = sum_g alpha_g(x) N(y; mu_g(x), sigma_g(x)^2 I_p)
//! ```
//!
//! with `alpha = softmax(logits)` and `sigma = sigma_floor + softplus(raw)`.
//! Training maximizes the mean log-likelihood on min-max normalized data;
//! the normalization is stored so that samples come back in original units.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{AffineMap, Dataset};
use crate::error::{CdetError, Result};
use crate::nn::{self, Activation, FitConfig, FitSummary, FnnParams, FnnSpec};
use crate::rng::{derive_seed, rng_from_seed, stream_rng, Rng, Stream};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Something that can draw `Y | X = x`.
pub trait ConditionalSampler: Sync {
    fn response_dim(&self) -> usize;
    fn covariate_dim(&self) -> usize;
    /// Draws one response for covariate `x` (original units) into `out`.
    fn sample_into(&self, x: &[f64], rng: &mut Rng, out: &mut [f64]);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdnTraining {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub learning_rate: f64,
}

impl Default for MdnTraining {
    fn default() -> Self {
        Self { batch_size: 128, max_epochs: 1000, patience: 50, validation_fraction: 0.2, learning_rate: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdnSpec {
    pub p: usize,
    pub d: usize,
    pub components: usize,
    pub backbone: FnnSpec,
    pub sigma_floor: f64,
    pub training: MdnTraining,
}

impl MdnSpec {
    pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-3;

    /// Leaky-ReLU backbone `d -> hidden -> G (p + 2)` with default training settings.
    pub fn new(p: usize, d: usize, components: usize, hidden: Vec<usize>) -> Self {
        Self {
            p,
            d,
            components,
            backbone: FnnSpec::new(
                d,
                hidden,
                components * (p + 2),
                Activation::LeakyRelu(nn::DEFAULT_LEAKY_SLOPE),
                0,
            ),
            sigma_floor: Self::DEFAULT_SIGMA_FLOOR,
            training: MdnTraining::default(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.components * (self.p + 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components == 0 || self.p == 0 || self.d == 0 {
            return Err(CdetError::InvalidSpec("mixture needs G, p, d >= 1".into()));
        }
        if self.backbone.output_dim != self.output_dim() {
            return Err(CdetError::InvalidSpec(format!(
                "backbone output {} != G(p+2) = {}",
                self.backbone.output_dim,
                self.output_dim()
            )));
        }
        if self.backbone.input_dim != self.d {
            return Err(CdetError::InvalidSpec(format!(
                "backbone input {} != d = {}",
                self.backbone.input_dim, self.d
            )));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(CdetError::InvalidSpec("sigma_floor must be positive".into()));
        }
        if self.training.batch_size == 0 {
            return Err(CdetError::InvalidSpec("batch size must be positive".into()));
        }
        self.backbone.validate()
    }
}

/// Mixture parameters at one covariate value.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub alphas: Vec<f64>,
    /// `G x p`, component-major.
    pub means: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl MixtureParams {
    pub fn components(&self) -> usize {
        self.alphas.len()
    }

    pub fn mean(&self, g: usize) -> &[f64] {
        let p = self.means.len() / self.alphas.len();
        &self.means[g * p..(g + 1) * p]
    }
}

#[inline]
fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Maps raw backbone outputs to mixture weights, means and scales.
pub fn head_transform(raw: &[f64], components: usize, p: usize, sigma_floor: f64) -> MixtureParams {
    let g = components;
    debug_assert_eq!(raw.len(), g * (p + 2));
    let logits = &raw[..g];
    let lse = log_sum_exp(logits);
    let alphas = logits.iter().map(|a| (a - lse).exp()).collect();
    let means = raw[g..g + g * p].to_vec();
    let sigmas = raw[g + g * p..].iter().map(|&s| sigma_floor + softplus(s)).collect();
    MixtureParams { alphas, means, sigmas }
}

/// Negative log mixture density of `y` given raw head outputs, optionally
/// writing its gradient with respect to `raw`.
pub fn mixture_nll(
    raw: &[f64],
    y: &[f64],
    components: usize,
    sigma_floor: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    const MAX_G: usize = 64;
    let g_count = components;
    let p = y.len();
    let logits = &raw[..g_count];
    let lse_a = log_sum_exp(logits);

    let mut comp_buf = [0.0f64; MAX_G];
    let mut heap;
    let comp: &mut [f64] = if g_count <= MAX_G {
        &mut comp_buf[..g_count]
    } else {
        heap = vec![0.0; g_count];
        &mut heap
    };
    let half_p_ln2pi = 0.5 * p as f64 * LN_2PI;
    for g in 0..g_count {
        let mu = &raw[g_count + g * p..g_count + (g + 1) * p];
        let sigma = sigma_floor + softplus(raw[g_count + g_count * p + g]);
        let r2: f64 = y.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
        comp[g] = (logits[g] - lse_a) - half_p_ln2pi - p as f64 * sigma.ln() - r2 / (2.0 * sigma * sigma);
    }
    let log_f = log_sum_exp(comp);
    if let Some(grad) = grad {
        for g in 0..g_count {
            let gamma = (comp[g] - log_f).exp();
            let alpha = (logits[g] - lse_a).exp();
            grad[g] = alpha - gamma;
            let s_raw = raw[g_count + g_count * p + g];
            let sigma = sigma_floor + softplus(s_raw);
            let inv_s2 = 1.0 / (sigma * sigma);
            let mu = &raw[g_count + g * p..g_count + (g + 1) * p];
            let mut r2 = 0.0;
            for j in 0..p {
                let diff = y[j] - mu[j];
                r2 += diff * diff;
                grad[g_count + g * p + j] = -gamma * diff * inv_s2;
            }
            grad[g_count + g_count * p + g] =
                gamma * (p as f64 / sigma - r2 * inv_s2 / sigma) * sigmoid(s_raw);
        }
    }
    -log_f
}

/// Conditional density value and its logarithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CondDensityEval {
    pub value: f64,
    pub log_value: f64,
}

impl CondDensityEval {
    fn from_log(log_value: f64) -> Self {
        Self { value: log_value.exp(), log_value }
    }
}

/// Min-max maps fitted on the training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub response: AffineMap,
    pub covariates: AffineMap,
}

impl Normalization {
    pub fn identity(p: usize, d: usize) -> Self {
        Self { response: AffineMap::identity(p), covariates: AffineMap::identity(d) }
    }
}

/// A trained mixture density network.
#[derive(Debug, Clone, PartialEq)]
pub struct MdnGenerator {
    spec: MdnSpec,
    params: FnnParams,
    normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub fit: FitSummary,
    pub n_train: usize,
    pub n_validation: usize,
    pub warnings: Vec<String>,
}

impl MdnGenerator {
    pub fn from_parts(spec: MdnSpec, params: FnnParams, normalization: Normalization) -> Result<Self> {
        spec.validate()?;
        if params.input_dim() != spec.d || params.output_dim() != spec.output_dim() {
            return Err(CdetError::InvalidSpec("parameter shapes do not match the spec".into()));
        }
        if normalization.response.dim() != spec.p || normalization.covariates.dim() != spec.d {
            return Err(CdetError::InvalidSpec("normalization dimensions do not match the spec".into()));
        }
        Ok(Self { spec, params, normalization })
    }

    pub fn spec(&self) -> &MdnSpec {
        &self.spec
    }

    pub fn params(&self) -> &FnnParams {
        &self.params
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// Mixture parameters at a covariate in normalized coordinates.
    pub fn mixture(&self, x_norm: &[f64]) -> Result<MixtureParams> {
        let raw = self.params.forward(x_norm)?;
        Ok(head_transform(&raw, self.spec.components, self.spec.p, self.spec.sigma_floor))
    }

    /// Mixture parameters at a covariate given in original units; the result
    /// is in normalized response coordinates.
    pub fn mixture_at(&self, x: &[f64]) -> Result<MixtureParams> {
        self.check_x(x)?;
        let mut xn = vec![0.0; self.spec.d];
        self.normalization.covariates.apply(x, &mut xn);
        self.mixture(&xn)
    }

    /// `ln f(y | x)` with both arguments in normalized coordinates.
    pub fn log_density(&self, y_norm: &[f64], x_norm: &[f64]) -> Result<f64> {
        if y_norm.len() != self.spec.p {
            return Err(CdetError::DimensionMismatch {
                expected: self.spec.p,
                actual: y_norm.len(),
                context: "response",
            });
        }
        if !y_norm.iter().chain(x_norm).all(|v| v.is_finite()) {
            return Err(CdetError::NonFinite("density argument".into()));
        }
        let raw = self.params.forward(x_norm)?;
        Ok(-mixture_nll(&raw, y_norm, self.spec.components, self.spec.sigma_floor, None))
    }

    pub fn density(&self, y_norm: &[f64], x_norm: &[f64]) -> Result<CondDensityEval> {
        self.log_density(y_norm, x_norm).map(CondDensityEval::from_log)
    }

    /// Conditional density in original units (includes the Jacobian of the
    /// response normalization).
    pub fn density_original(&self, y: &[f64], x: &[f64]) -> Result<CondDensityEval> {
        self.check_x(x)?;
        let mut yn = vec![0.0; self.spec.p];
        let mut xn = vec![0.0; self.spec.d];
        self.normalization.response.apply(y, &mut yn);
        self.normalization.covariates.apply(x, &mut xn);
        let ln = self.log_density(&yn, &xn)? - self.normalization.response.log_scale_sum();
        Ok(CondDensityEval::from_log(ln))
    }

    /// `E[Y | X = x]` in original units.
    pub fn conditional_mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mix = self.mixture_at(x)?;
        let mut m = vec![0.0; self.spec.p];
        for g in 0..mix.components() {
            for (mj, muj) in m.iter_mut().zip(mix.mean(g)) {
                *mj += mix.alphas[g] * muj;
            }
        }
        let mut out = vec![0.0; self.spec.p];
        self.normalization.response.invert(&m, &mut out);
        Ok(out)
    }

    /// One draw of `Y | X = x` in original units, reproducible from `seed`.
    pub fn sample(&self, x: &[f64], seed: u64) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let mut out = vec![0.0; self.spec.p];
        self.sample_into(x, &mut rng_from_seed(seed), &mut out);
        Ok(out)
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.d {
            return Err(CdetError::DimensionMismatch {
                expected: self.spec.d,
                actual: x.len(),
                context: "covariate",
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(CdetError::NonFinite("covariate".into()));
        }
        Ok(())
    }

    pub fn to_stored(&self) -> StoredGenerator {
        StoredGenerator {
            format: StoredGenerator::FORMAT.to_string(),
            spec: self.spec.clone(),
            normalization: self.normalization.clone(),
            parameters: self.params.to_flat(),
        }
    }

    pub fn from_stored(stored: StoredGenerator) -> Result<Self> {
        if stored.format != StoredGenerator::FORMAT {
            return Err(CdetError::Config(format!("unknown generator format `{}`", stored.format)));
        }
        let params = FnnParams::from_flat(&stored.spec.backbone, &stored.parameters)?;
        Self::from_parts(stored.spec, params, stored.normalization)
    }
}

impl ConditionalSampler for MdnGenerator {
    fn response_dim(&self) -> usize {
        self.spec.p
    }

    fn covariate_dim(&self) -> usize {
        self.spec.d
    }

    fn sample_into(&self, x: &[f64], rng: &mut Rng, out: &mut [f64]) {
        let mix = self.mixture_at(x).expect("covariate dimension checked by caller");
        // Component index with probability alpha_g.
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut g = mix.components() - 1;
        for (k, a) in mix.alphas.iter().enumerate() {
            acc += a;
            if u < acc {
                g = k;
                break;
            }
        }
        let sigma = mix.sigmas[g];
        let mut yn = vec![0.0; self.spec.p];
        for (v, mu) in yn.iter_mut().zip(mix.mean(g)) {
            let w: f64 = StandardNormal.sample(rng);
            *v = mu + sigma * w;
        }
        self.normalization.response.invert(&yn, out);
    }
}

/// Serialized form: spec, normalization and a flat parameter array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredGenerator {
    pub format: String,
    pub spec: MdnSpec,
    pub normalization: Normalization,
    pub parameters: Vec<f64>,
}

impl StoredGenerator {
    pub const FORMAT: &'static str = "cdet-mdn/1";
}

/// Fits the mixture density network to `data` by mini-batch Adam on the
/// negative mean log-likelihood with early stopping on a validation split.
pub fn train(data: &Dataset, spec: &MdnSpec, seed: u64) -> Result<(MdnGenerator, TrainingSummary)> {
    spec.validate()?;
    if data.p() != spec.p || data.d() != spec.d {
        return Err(CdetError::DimensionMismatch {
            expected: spec.p + spec.d,
            actual: data.p() + data.d(),
            context: "training data dimensions",
        });
    }
    if data.len() < spec.training.batch_size {
        return Err(CdetError::precondition(format!(
            "training sample has {} rows, fewer than the batch size {}",
            data.len(),
            spec.training.batch_size
        )));
    }
    if !data.is_finite() {
        return Err(CdetError::NonFinite("training data".into()));
    }

    let mut warnings = Vec::new();
    let (response, deg_y) = AffineMap::min_max(data.responses(), spec.p);
    let (covariates, deg_x) = AffineMap::min_max(data.covariates(), spec.d);
    for j in deg_y {
        warnings.push(format!("response column {j} is constant; widened to a unit range"));
    }
    for j in deg_x {
        warnings.push(format!("covariate column {j} is constant; widened to a unit range"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let normalization = Normalization { response, covariates };
    let xs = normalization.covariates.apply_rows(data.covariates());
    let ys = normalization.response.apply_rows(data.responses());

    let mut effective = spec.clone();
    effective.backbone.seed = derive_seed(seed, 0xB0);
    let mut params = nn::init_params(&effective.backbone)?;

    let mut rng = stream_rng(seed, Stream::Training);
    let (train_rows, val_rows) =
        nn::train_validation_split(data.len(), spec.training.validation_fraction, &mut rng);
    let fit_cfg = FitConfig {
        batch_size: spec.training.batch_size,
        max_epochs: spec.training.max_epochs,
        patience: spec.training.patience,
        learning_rate: spec.training.learning_rate,
    };
    let (p, g, floor) = (spec.p, spec.components, spec.sigma_floor);
    let loss = |row: usize, out: &[f64], grad: Option<&mut [f64]>| {
        mixture_nll(out, &ys[row * p..(row + 1) * p], g, floor, grad)
    };
    let fit = nn::fit_minibatch(&mut params, &xs, &train_rows, &val_rows, &fit_cfg, &mut rng, &loss)?;
    log::debug!(
        "mdn trained: {} epochs, best epoch {} (validation nll {:.5})",
        fit.epochs_run,
        fit.best_epoch,
        fit.best_loss
    );
    let summary = TrainingSummary { fit, n_train: train_rows.len(), n_validation: val_rows.len(), warnings };
    Ok((MdnGenerator { spec: effective, params, normalization }, summary))
}

/// Draws `Y_i | X_i` for every row of the row-major `covariates` matrix and
/// returns the dataset `(Y_hat_i, X_i)`; covariates pass through unchanged.
pub fn generate_dataset<S: ConditionalSampler + ?Sized>(
    sampler: &S,
    covariates: &[f64],
    seed: u64,
) -> Result<Dataset> {
    let (p, d) = (sampler.response_dim(), sampler.covariate_dim());
    if covariates.len() % d != 0 {
        return Err(CdetError::DimensionMismatch {
            expected: d,
            actual: covariates.len() % d,
            context: "covariate matrix width",
        });
    }
    if !covariates.iter().all(|v| v.is_finite()) {
        return Err(CdetError::NonFinite("covariates".into()));
    }
    let n = covariates.len() / d;
    let mut rng = stream_rng(seed, Stream::Generation);
    let mut responses = vec![0.0; n * p];
    for (x, y) in covariates.chunks_exact(d).zip(responses.chunks_exact_mut(p)) {
        sampler.sample_into(x, &mut rng, y);
    }
    Dataset::new(p, d, responses, covariates.to_vec())
}
