//! Paired response/covariate samples and the affine maps used to move them
//! in and out of the unit cube.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CdetError, Result};

/// `n` rows of a `p`-dimensional response and a `d`-dimensional covariate,
/// stored row-major with shared row indexing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    p: usize,
    d: usize,
    responses: Vec<f64>,
    covariates: Vec<f64>,
}

impl Dataset {
    pub fn new(p: usize, d: usize, responses: Vec<f64>, covariates: Vec<f64>) -> Result<Self> {
        if p == 0 || d == 0 {
            return Err(CdetError::precondition(
                "response and covariate dimensions must be positive",
            ));
        }
        if responses.len() % p != 0 {
            return Err(CdetError::DimensionMismatch {
                expected: p,
                actual: responses.len() % p,
                context: "response buffer length is not a multiple of p",
            });
        }
        let n = responses.len() / p;
        if covariates.len() != n * d {
            return Err(CdetError::DimensionMismatch {
                expected: n * d,
                actual: covariates.len(),
                context: "covariate buffer length",
            });
        }
        Ok(Self { p, d, responses, covariates })
    }

    pub fn empty(p: usize, d: usize) -> Self {
        Self { p, d, responses: Vec::new(), covariates: Vec::new() }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.responses.len() / self.p
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn response(&self, i: usize) -> &[f64] {
        &self.responses[i * self.p..(i + 1) * self.p]
    }

    pub fn covariate(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.d..(i + 1) * self.d]
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn responses_mut(&mut self) -> &mut [f64] {
        &mut self.responses
    }

    /// Writes `(y, x)` for row `i` into `out` (length `p + d`).
    pub fn joint_into(&self, i: usize, out: &mut [f64]) {
        out[..self.p].copy_from_slice(self.response(i));
        out[self.p..].copy_from_slice(self.covariate(i));
    }

    pub fn is_finite(&self) -> bool {
        self.responses.iter().chain(&self.covariates).all(|v| v.is_finite())
    }

    pub fn push(&mut self, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.p);
        debug_assert_eq!(x.len(), self.d);
        self.responses.extend_from_slice(y);
        self.covariates.extend_from_slice(x);
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        let mut out = Dataset {
            p: self.p,
            d: self.d,
            responses: Vec::with_capacity(rows.len() * self.p),
            covariates: Vec::with_capacity(rows.len() * self.d),
        };
        for &i in rows {
            out.push(self.response(i), self.covariate(i));
        }
        out
    }

    /// Concatenates `other` below `self`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        self.check_dims(other)?;
        let mut out = self.clone();
        out.responses.extend_from_slice(&other.responses);
        out.covariates.extend_from_slice(&other.covariates);
        Ok(out)
    }

    pub fn check_dims(&self, other: &Dataset) -> Result<()> {
        if self.p != other.p {
            return Err(CdetError::DimensionMismatch {
                expected: self.p,
                actual: other.p,
                context: "response dimension",
            });
        }
        if self.d != other.d {
            return Err(CdetError::DimensionMismatch {
                expected: self.d,
                actual: other.d,
                context: "covariate dimension",
            });
        }
        Ok(())
    }

    /// Randomly partitions the rows into `parts` equal groups. Leftover rows
    /// (`len % parts` of them, chosen uniformly) are dropped.
    pub fn split_equal<R: Rng + ?Sized>(&self, parts: usize, rng: &mut R) -> Vec<Dataset> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let size = self.len() / parts;
        (0..parts)
            .map(|k| self.select(&idx[k * size..(k + 1) * size]))
            .collect()
    }

    pub fn shift_responses(&mut self, delta: f64) {
        self.responses.iter_mut().for_each(|v| *v += delta);
    }
}

/// Per-coordinate affine map `z = (v - offset) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl AffineMap {
    pub fn identity(dim: usize) -> Self {
        Self { offset: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    /// Min-max map sending each coordinate's observed range onto `[0, 1]`.
    /// Returns the map and the indices of constant coordinates, which are
    /// widened to a unit range centred on the constant.
    pub fn min_max(values: &[f64], dim: usize) -> (Self, Vec<usize>) {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for row in values.chunks_exact(dim) {
            for j in 0..dim {
                lo[j] = lo[j].min(row[j]);
                hi[j] = hi[j].max(row[j]);
            }
        }
        let mut degenerate = Vec::new();
        let mut scale = vec![1.0; dim];
        for j in 0..dim {
            if !lo[j].is_finite() {
                lo[j] = 0.0;
                continue;
            }
            let width = hi[j] - lo[j];
            if width > 0.0 && width.is_finite() {
                scale[j] = width;
            } else {
                degenerate.push(j);
                lo[j] -= 0.5;
            }
        }
        (Self { offset: lo, scale }, degenerate)
    }

    /// Z-score map from column means and standard deviations.
    pub fn standardize(values: &[f64], dim: usize) -> Self {
        let n = (values.len() / dim).max(1) as f64;
        let mut mean = vec![0.0; dim];
        for row in values.chunks_exact(dim) {
            for j in 0..dim {
                mean[j] += row[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in values.chunks_exact(dim) {
            for j in 0..dim {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 1e-12 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { offset: mean, scale }
    }

    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        for j in 0..self.dim() {
            out[j] = (v[j] - self.offset[j]) / self.scale[j];
        }
    }

    pub fn invert(&self, z: &[f64], out: &mut [f64]) {
        for j in 0..self.dim() {
            out[j] = z[j] * self.scale[j] + self.offset[j];
        }
    }

    /// Applies the map to every row of a row-major buffer.
    pub fn apply_rows(&self, values: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        let mut out = vec![0.0; values.len()];
        for (src, dst) in values.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
            self.apply(src, dst);
        }
        out
    }

    /// `sum_j ln scale_j`, the log-Jacobian of the inverse map.
    pub fn log_scale_sum(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }
}
