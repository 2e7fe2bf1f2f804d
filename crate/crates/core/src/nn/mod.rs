//! Small trainable-parameter substrate: dense matrices, feed-forward stacks with
//! hand-written backward passes, a stable softmax, Adam, and a central-difference
//! gradient checker used to verify every analytic gradient in the crate.

mod adam;
mod ffn;
mod gradcheck;
mod matrix;

pub use adam::{Adam, AdamConfig};
pub use ffn::{Activation, FfnCache, FfnSpec};
pub use gradcheck::grad_check;
pub use matrix::{axpy, cosine, dot, l2_norm, Matrix};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite value in parameter `{0}` after update")]
    NonFiniteParameter(String),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

/// Named collection of parameter matrices. Shapes are fixed at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Appends a parameter and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, slot: usize) -> &Matrix {
        &self.values[slot]
    }

    #[inline]
    pub fn get_mut(&mut self, slot: usize) -> &mut Matrix {
        &mut self.values[slot]
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.as_slice().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.iter() {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for x in m.as_slice() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers shaped like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    mats: Vec<Matrix>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            mats: store
                .values
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    #[inline]
    pub fn get(&self, slot: usize) -> &Matrix {
        &self.mats[slot]
    }

    #[inline]
    pub fn get_mut(&mut self, slot: usize) -> &mut Matrix {
        &mut self.mats[slot]
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Grads) {
        for (a, b) in self.mats.iter_mut().zip(&other.mats) {
            a.add_scaled(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.mats.iter_mut().for_each(|m| m.scale(alpha));
    }

    pub fn clear(&mut self) {
        self.mats.iter_mut().for_each(|m| m.fill(0.0));
    }

    pub fn is_finite(&self) -> bool {
        self.mats.iter().all(Matrix::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.mats.iter().fold(0.0, |m, g| m.max(g.max_abs()))
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// `log(sum(exp(x)))`, stabilised.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-softmax computed as `x - logsumexp(x)`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&l| l - lse).collect()
}

/// Backward through softmax: given `p = softmax(z)` and `dL/dp`, returns `dL/dz`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner = dot(p, dp);
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}
