//! Multi-class logistic regression without a bias term.
//!
//! Weights are a `d × C` matrix stored row-major, so the logit of class `c`
//! for input `x` is `Σ_j x_j W[j, c]`.

use std::borrow::Cow;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::dataset::LabeledSample;
use crate::error::{CrflError, Result};

/// Probabilities are floored at this value before taking the log.
const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dim: usize,
    classes: usize,
    weights: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        ModelParams {
            dim,
            classes,
            weights: vec![0.0; dim * classes],
        }
    }

    pub fn from_vec(dim: usize, classes: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != dim * classes {
            return Err(CrflError::DimensionMismatch {
                expected: format!("{} weights ({dim}x{classes})", dim * classes),
                actual: format!("{} weights", weights.len()),
            });
        }
        Ok(ModelParams {
            dim,
            classes,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.weights
    }

    pub fn get(&self, row: usize, class: usize) -> f64 {
        self.weights[row * self.classes + class]
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.dim == other.dim && self.classes == other.classes
    }

    pub(crate) fn check_shape(&self, other: &ModelParams) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(CrflError::DimensionMismatch {
                expected: format!("{}x{}", self.dim, self.classes),
                actual: format!("{}x{}", other.dim, other.classes),
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// `self - other`.
    pub fn sub(&self, other: &ModelParams) -> ModelParams {
        debug_assert!(self.same_shape(other));
        ModelParams {
            dim: self.dim,
            classes: self.classes,
            weights: self
                .weights
                .iter()
                .zip(&other.weights)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
    }

    pub fn distance(&self, other: &ModelParams) -> f64 {
        debug_assert!(self.same_shape(other));
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Raw class scores `x W`.
    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        debug_assert_eq!(features.len(), self.dim);
        let c = self.classes;
        let mut out = vec![0.0; c];
        for (j, &xj) in features.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let row = &self.weights[j * c..(j + 1) * c];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xj * w;
            }
        }
        out
    }

    /// Write the checkpoint format: `d` and `C` as little-endian u64, then
    /// the weights as little-endian f64 in row-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 8 * self.weights.len());
        buf.extend_from_slice(&(self.dim as u64).to_le_bytes());
        buf.extend_from_slice(&(self.classes as u64).to_le_bytes());
        for w in &self.weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |message: &str| CrflError::Format {
            path: "<checkpoint>".into(),
            message: message.to_string(),
        };
        if bytes.len() < 16 {
            return Err(bad("checkpoint shorter than its 16-byte header"));
        }
        let dim = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let classes = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        let expected = dim
            .checked_mul(classes)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| bad("header dimensions overflow"))?;
        if body.len() != expected {
            return Err(bad(&format!(
                "expected {expected} weight bytes for {dim}x{classes}, found {}",
                body.len()
            )));
        }
        let weights = body
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        Ok(ModelParams {
            dim,
            classes,
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| CrflError::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| CrflError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CrflError::io(path, e))?;
        ModelParams::from_bytes(&bytes).map_err(|e| match e {
            CrflError::Format { message, .. } => CrflError::Format {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }
}

/// A non-empty mini-batch. Samples are borrowed from the client pool unless
/// they had to be rewritten (triggered).
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    samples: Vec<Cow<'a, LabeledSample>>,
}

impl<'a> Batch<'a> {
    pub fn new(samples: Vec<Cow<'a, LabeledSample>>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| CrflError::config("batch must not be empty"))?;
        let dim = first.features.len();
        if samples.iter().any(|s| s.features.len() != dim) {
            return Err(CrflError::Consistency(
                "batch samples have differing feature dimensions".into(),
            ));
        }
        Ok(Batch { samples })
    }

    pub fn borrowed(samples: &'a [LabeledSample]) -> Result<Self> {
        Batch::new(samples.iter().map(Cow::Borrowed).collect())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LabeledSample> {
        self.samples.iter().map(|s| s.as_ref())
    }
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of raw logits with max-logit subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

pub fn softmax_probs(params: &ModelParams, features: &[f64]) -> Vec<f64> {
    let mut z = params.logits(features);
    softmax_in_place(&mut z);
    z
}

/// Lowest index attaining the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted class; ties resolve to the lowest class index. Softmax is
/// monotone, so the argmax is taken over logits directly.
pub fn predict(params: &ModelParams, features: &[f64]) -> usize {
    argmax(&params.logits(features))
}

/// Mean cross-entropy `-log p_y(x)` over the batch.
pub fn cross_entropy_loss(params: &ModelParams, batch: &Batch<'_>) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|s| {
            let p = softmax_probs(params, &s.features);
            -p[s.label].max(PROB_FLOOR).ln()
        })
        .sum();
    total / batch.len() as f64
}

/// Mean of `xᵀ(P(x) − Y)` over the batch, shaped like the weights.
pub fn gradient(params: &ModelParams, batch: &Batch<'_>) -> ModelParams {
    let c = params.classes();
    let mut grad = ModelParams::zeros(params.dim(), c);
    let g = grad.as_mut_slice();
    for s in batch.iter() {
        let mut residual = softmax_probs(params, &s.features);
        residual[s.label] -= 1.0;
        for (j, &xj) in s.features.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let row = &mut g[j * c..(j + 1) * c];
            for (gv, r) in row.iter_mut().zip(&residual) {
                *gv += xj * r;
            }
        }
    }
    grad.scale(1.0 / batch.len() as f64);
    grad
}

/// Data-Lipschitz constant of the softmax-regression gradient for weights
/// bounded by `rho` in l2 norm: `sqrt(2 + 2ρ + ρ²)`.
pub fn lipschitz_constant_lz(rho: f64) -> f64 {
    (2.0 + 2.0 * rho + rho * rho).sqrt()
}

pub fn param_l2_norm(params: &ModelParams) -> f64 {
    params.as_slice().iter().map(|w| w * w).sum::<f64>().sqrt()
}

/// Fraction of samples predicted correctly.
pub fn accuracy(params: &ModelParams, samples: &[LabeledSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .filter(|s| predict(params, &s.features) == s.label)
        .count();
    hits as f64 / samples.len() as f64
}
