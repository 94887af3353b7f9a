//! A small dense feedforward network engine: forward pass, reverse-mode
//! gradients and Adam. Both the mixture density network and the neural
//! classifier sit on top of it.
//!
//! Networks alternate affine maps and a (leaky) ReLU; the final layer is
//! affine with no activation. Weights are stored row-major as
//! `outputs x inputs`.
//!
//! Two code paths exist. [`FnnParams::forward`] / [`FnnParams::backward`]
//! work on one input vector with plain loops. The `*_batch` variants work
//! on a row-major batch and use `matrixmultiply` kernels; training uses
//! those.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CdetError, Result};
use crate::rng::{rng_from_seed, Rng as StdRng};

/// Default negative slope for leaky ReLU.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    /// `z` for `z > 0`, else `a * z`, with `a` in `[0, 1)`.
    LeakyRelu(f64),
    Relu,
}

impl Activation {
    pub fn slope(self) -> f64 {
        match self {
            Activation::LeakyRelu(a) => a,
            Activation::Relu => 0.0,
        }
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        if z > 0.0 {
            z
        } else {
            self.slope() * z
        }
    }

    /// Derivative, taking the slope `a` at `z = 0`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        if z > 0.0 {
            1.0
        } else {
            self.slope()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnnSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl FnnSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, output_dim: usize, activation: Activation, seed: u64) -> Self {
        Self { input_dim, hidden_widths, output_dim, activation, seed }
    }

    /// An empty `hidden_widths` is allowed and yields a single affine map
    /// (linear logistic regression uses this).
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(CdetError::InvalidSpec(format!(
                "zero dimension in {} -> {:?} -> {}",
                self.input_dim, self.hidden_widths, self.output_dim
            )));
        }
        let a = self.activation.slope();
        if !(0.0..1.0).contains(&a) {
            return Err(CdetError::InvalidSpec(format!("leaky slope {a} outside [0, 1)")));
        }
        Ok(())
    }

    /// Widths of every layer boundary, input first and output last.
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.hidden_widths.iter().copied())
            .chain(std::iter::once(self.output_dim))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.inputs + col]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnnParams {
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

/// Gradients returned by [`FnnParams::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub params: FnnParams,
    pub input: Vec<f64>,
}

/// He-scaled Gaussian weights (variance `2 / fan_in`) and zero biases.
pub fn init_params(spec: &FnnSpec) -> Result<FnnParams> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let dims = spec.layer_dims();
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let weights = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
            Layer { inputs: fan_in, outputs: fan_out, weights, bias: vec![0.0; fan_out] }
        })
        .collect();
    Ok(FnnParams { activation: spec.activation, layers })
}

impl FnnParams {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            activation: self.activation,
            layers: self.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for v in self.values_mut() {
            *v = 0.0;
        }
    }

    /// All parameters in a fixed order: per layer, weights then bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    /// Rebuilds parameters for `spec` from a flat array in [`values`](Self::values) order.
    pub fn from_flat(spec: &FnnSpec, flat: &[f64]) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        let mut params = FnnParams {
            activation: spec.activation,
            layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        };
        if params.num_params() != flat.len() {
            return Err(CdetError::DimensionMismatch {
                expected: params.num_params(),
                actual: flat.len(),
                context: "flat parameter array",
            });
        }
        for (dst, src) in params.values_mut().zip(flat) {
            *dst = *src;
        }
        Ok(params)
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Evaluates the network at one input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = affine(layer, &h);
            if i < last {
                z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            h = z;
        }
        Ok(h)
    }

    /// Reverse-mode gradient of `upstream . forward(x)` with respect to every
    /// parameter and to `x`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Gradient> {
        self.check_input(x)?;
        if upstream.len() != self.output_dim() {
            return Err(CdetError::DimensionMismatch {
                expected: self.output_dim(),
                actual: upstream.len(),
                context: "upstream gradient",
            });
        }
        // Inputs to each layer and pre-activations of each layer.
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let z = affine(layer, &h);
            inputs.push(h);
            h = z.iter().map(|&v| self.activation.apply(v)).collect();
            pre.push(z);
        }

        let mut grads = self.zeros_like();
        let mut delta = upstream.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let g = &mut grads.layers[li];
            let input = &inputs[li];
            for o in 0..layer.outputs {
                g.bias[o] = delta[o];
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, &xi) in row.iter_mut().zip(input) {
                    *w = delta[o] * xi;
                }
            }
            let mut prev = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                for (j, p) in prev.iter_mut().enumerate() {
                    *p += layer.weight(o, j) * delta[o];
                }
            }
            if li > 0 {
                for (p, &z) in prev.iter_mut().zip(&pre[li - 1]) {
                    *p *= self.activation.derivative(z);
                }
            }
            delta = prev;
        }
        Ok(Gradient { params: grads, input: delta })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(CdetError::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
                context: "network input",
            });
        }
        Ok(())
    }

    /// Batched forward pass over a row-major `batch x input_dim` buffer.
    /// Intermediate values are kept in `cache` for [`backward_batch`](Self::backward_batch).
    pub fn forward_batch<'c>(&self, input: &[f64], cache: &'c mut BatchCache) -> &'c [f64] {
        let batch = input.len() / self.input_dim();
        debug_assert_eq!(batch * self.input_dim(), input.len());
        cache.batch = batch;
        cache.inputs.resize_with(self.layers.len(), Vec::new);
        cache.pre.resize_with(self.layers.len(), Vec::new);
        cache.inputs[0].clear();
        cache.inputs[0].extend_from_slice(input);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (inputs, pre) = (&mut cache.inputs, &mut cache.pre);
            let z = &mut pre[i];
            z.clear();
            z.reserve(batch * layer.outputs);
            for _ in 0..batch {
                z.extend_from_slice(&layer.bias);
            }
            // z (batch x out) += input (batch x in) * W^T
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    layer.inputs,
                    layer.outputs,
                    1.0,
                    inputs[i].as_ptr(),
                    layer.inputs as isize,
                    1,
                    layer.weights.as_ptr(),
                    1,
                    layer.inputs as isize,
                    1.0,
                    z.as_mut_ptr(),
                    layer.outputs as isize,
                    1,
                );
            }
            if i < last {
                let act = self.activation;
                let next = &mut inputs[i + 1];
                next.clear();
                next.extend(z.iter().map(|&v| act.apply(v)));
            }
        }
        &cache.pre[last]
    }

    /// Accumulates into `grads` the gradient of `sum(upstream .* output)` for
    /// the batch last passed through [`forward_batch`](Self::forward_batch).
    pub fn backward_batch(&self, cache: &mut BatchCache, upstream: &[f64], grads: &mut FnnParams) {
        let batch = cache.batch;
        debug_assert_eq!(upstream.len(), batch * self.output_dim());
        cache.delta.clear();
        cache.delta.extend_from_slice(upstream);
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let g = &mut grads.layers[li];
            let delta = &cache.delta;
            for row in delta.chunks_exact(layer.outputs) {
                for (b, d) in g.bias.iter_mut().zip(row) {
                    *b += d;
                }
            }
            // dW (out x in) += delta^T (out x batch) * input (batch x in)
            unsafe {
                matrixmultiply::dgemm(
                    layer.outputs,
                    batch,
                    layer.inputs,
                    1.0,
                    delta.as_ptr(),
                    1,
                    layer.outputs as isize,
                    cache.inputs[li].as_ptr(),
                    layer.inputs as isize,
                    1,
                    1.0,
                    g.weights.as_mut_ptr(),
                    layer.inputs as isize,
                    1,
                );
            }
            if li == 0 {
                break;
            }
            // prev (batch x in) = delta (batch x out) * W (out x in)
            cache.scratch.clear();
            cache.scratch.resize(batch * layer.inputs, 0.0);
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    layer.outputs,
                    layer.inputs,
                    1.0,
                    delta.as_ptr(),
                    layer.outputs as isize,
                    1,
                    layer.weights.as_ptr(),
                    layer.inputs as isize,
                    1,
                    0.0,
                    cache.scratch.as_mut_ptr(),
                    layer.inputs as isize,
                    1,
                );
            }
            let act = self.activation;
            for (p, &z) in cache.scratch.iter_mut().zip(&cache.pre[li - 1]) {
                *p *= act.derivative(z);
            }
            std::mem::swap(&mut cache.delta, &mut cache.scratch);
        }
    }
}

fn affine(layer: &Layer, h: &[f64]) -> Vec<f64> {
    (0..layer.outputs)
        .map(|o| {
            let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
            layer.bias[o] + row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect()
}

/// Scratch buffers reused across batched passes.
#[derive(Debug, Default, Clone)]
pub struct BatchCache {
    batch: usize,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    delta: Vec<f64>,
    scratch: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &FnnParams, config: AdamConfig) -> Self {
        let n = params.num_params();
        Self { config, step: 0, first: vec![0.0; n], second: vec![0.0; n] }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut FnnParams, grads: &FnnParams, state: &mut AdamState) -> Result<()> {
    if grads.num_params() != state.first.len() || params.num_params() != state.first.len() {
        return Err(CdetError::DimensionMismatch {
            expected: state.first.len(),
            actual: grads.num_params(),
            context: "adam parameter count",
        });
    }
    if !grads.is_finite() {
        return Err(CdetError::NonFinite(format!("gradient at adam step {}", state.step + 1)));
    }
    state.step += 1;
    let AdamConfig { learning_rate, beta1, beta2, epsilon } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params
        .values_mut()
        .zip(grads.values())
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

/// Mini-batch training schedule with early stopping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub learning_rate: f64,
}

/// One improvement of the monitored loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_loss: f64,
    /// Monitored loss at the end of every epoch.
    pub history: Vec<f64>,
    /// Successive best checkpoints; losses strictly decrease.
    pub checkpoints: Vec<Checkpoint>,
}

/// Per-row loss used by [`fit_minibatch`]. Given the row index and the
/// network output for that row, returns the loss and, when `grad` is
/// provided, writes the derivative of the loss with respect to the output.
pub trait RowLoss: Sync {
    fn loss(&self, row: usize, output: &[f64], grad: Option<&mut [f64]>) -> f64;
}

impl<F> RowLoss for F
where
    F: Fn(usize, &[f64], Option<&mut [f64]>) -> f64 + Sync,
{
    fn loss(&self, row: usize, output: &[f64], grad: Option<&mut [f64]>) -> f64 {
        self(row, output, grad)
    }
}

/// Minimizes the mean of `loss` over `train_rows` by Adam on shuffled
/// mini-batches. `inputs` is the full row-major design matrix; rows are
/// referenced by index. The monitored loss is the mean validation loss, or
/// the mean training loss of the epoch when `val_rows` is empty. Returns
/// the parameters from the best epoch.
pub fn fit_minibatch<L: RowLoss>(
    params: &mut FnnParams,
    inputs: &[f64],
    train_rows: &[usize],
    val_rows: &[usize],
    config: &FitConfig,
    rng: &mut StdRng,
    loss: &L,
) -> Result<FitSummary> {
    if train_rows.is_empty() {
        return Err(CdetError::precondition("no training rows"));
    }
    let in_dim = params.input_dim();
    let out_dim = params.output_dim();
    let batch_size = config.batch_size.max(1).min(train_rows.len());
    let mut adam = AdamState::new(params, AdamConfig::with_learning_rate(config.learning_rate));
    let mut grads = params.zeros_like();
    let mut cache = BatchCache::default();
    let mut batch_in = Vec::with_capacity(batch_size * in_dim);
    let mut upstream = vec![0.0; batch_size * out_dim];
    let mut order = train_rows.to_vec();

    let mut best = params.clone();
    let mut summary = FitSummary { best_loss: f64::INFINITY, ..FitSummary::default() };
    let mut since_best = 0usize;

    for epoch in 1..=config.max_epochs {
        shuffle(&mut order, rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            batch_in.clear();
            for &r in chunk {
                batch_in.extend_from_slice(&inputs[r * in_dim..(r + 1) * in_dim]);
            }
            let out = params.forward_batch(&batch_in, &mut cache);
            let scale = 1.0 / chunk.len() as f64;
            upstream.resize(chunk.len() * out_dim, 0.0);
            let mut batch_loss = 0.0;
            for (k, &r) in chunk.iter().enumerate() {
                let g = &mut upstream[k * out_dim..(k + 1) * out_dim];
                batch_loss += loss.loss(r, &out[k * out_dim..(k + 1) * out_dim], Some(g));
                g.iter_mut().for_each(|v| *v *= scale);
            }
            if !batch_loss.is_finite() {
                return Err(CdetError::Divergence { epoch, reason: "non-finite training loss".into() });
            }
            epoch_loss += batch_loss;
            grads.fill_zero();
            params.backward_batch(&mut cache, &upstream, &mut grads);
            adam_step(params, &grads, &mut adam)
                .map_err(|e| CdetError::Divergence { epoch, reason: e.to_string() })?;
        }
        let monitored = if val_rows.is_empty() {
            epoch_loss / train_rows.len() as f64
        } else {
            mean_loss(params, inputs, val_rows, loss, &mut cache)
        };
        if !monitored.is_finite() {
            return Err(CdetError::Divergence { epoch, reason: "non-finite validation loss".into() });
        }
        summary.epochs_run = epoch;
        summary.history.push(monitored);
        if monitored < summary.best_loss {
            summary.best_loss = monitored;
            summary.best_epoch = epoch;
            summary.checkpoints.push(Checkpoint { epoch, loss: monitored });
            best.clone_from(params);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    *params = best;
    Ok(summary)
}

/// Mean of `loss` over `rows` at the current parameters.
pub fn mean_loss<L: RowLoss>(
    params: &FnnParams,
    inputs: &[f64],
    rows: &[usize],
    loss: &L,
    cache: &mut BatchCache,
) -> f64 {
    const CHUNK: usize = 1024;
    let in_dim = params.input_dim();
    let out_dim = params.output_dim();
    let mut buf = Vec::with_capacity(CHUNK * in_dim);
    let mut total = 0.0;
    for chunk in rows.chunks(CHUNK) {
        buf.clear();
        for &r in chunk {
            buf.extend_from_slice(&inputs[r * in_dim..(r + 1) * in_dim]);
        }
        let out = params.forward_batch(&buf, cache);
        for (k, &r) in chunk.iter().enumerate() {
            total += loss.loss(r, &out[k * out_dim..(k + 1) * out_dim], None);
        }
    }
    total / rows.len().max(1) as f64
}

fn shuffle<R: Rng + ?Sized>(v: &mut [usize], rng: &mut R) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

/// Splits `0..n` into shuffled training and validation row sets.
pub fn train_validation_split(n: usize, validation_fraction: f64, rng: &mut StdRng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, rng);
    let n_val = ((n as f64) * validation_fraction.clamp(0.0, 0.9)).round() as usize;
    let n_val = if n - n_val == 0 { 0 } else { n_val };
    let val = idx.split_off(n - n_val);
    (idx, val)
}
