//! Two-layer tanh MLP with hand-written backpropagation.
//!
//! `logits = W2 · tanh(W1 · x + b1) + b2`, batched row-wise: a batch `X` is
//! `n × d` and produces `n × C` logits.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{BoltError, Result};
use crate::tensor_store::{Role, TensorContainer, TensorEntry};

pub const W1: &str = "W1";
pub const B1: &str = "b1";
pub const W2: &str = "W2";
pub const B2: &str = "b2";

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    /// hidden × input
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// classes × hidden
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl ToyModel {
    pub fn zeros(input_dim: usize, hidden: usize, classes: usize) -> Self {
        ToyModel {
            w1: DMatrix::zeros(hidden, input_dim),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(classes, hidden),
            b2: DVector::zeros(classes),
        }
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        let s1 = 1.0 / (input_dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        let w1 = DMatrix::from_fn(hidden, input_dim, |_, _| s1 * rng.sample::<f64, _>(StandardNormal));
        let w2 = DMatrix::from_fn(classes, hidden, |_, _| s2 * rng.sample::<f64, _>(StandardNormal));
        ToyModel {
            w1,
            b1: DVector::zeros(hidden),
            w2,
            b2: DVector::zeros(classes),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn classes(&self) -> usize {
        self.w2.nrows()
    }

    pub fn to_container(&self, model_id: &str) -> TensorContainer {
        TensorContainer::new(model_id, Role::Checkpoint).with_entries(vec![
            TensorEntry::from_matrix(W1, &self.w1),
            TensorEntry::from_vector(B1, self.b1.as_slice()),
            TensorEntry::from_matrix(W2, &self.w2),
            TensorEntry::from_vector(B2, self.b2.as_slice()),
        ])
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let w1 = c.matrix(W1)?;
        let w2 = c.matrix(W2)?;
        let b1 = DVector::from_vec(c.require(B1)?.data.clone());
        let b2 = DVector::from_vec(c.require(B2)?.data.clone());
        if b1.len() != w1.nrows() || w2.ncols() != w1.nrows() || b2.len() != w2.nrows() {
            return Err(BoltError::Architecture(vec![W1.into(), B1.into(), W2.into(), B2.into()]));
        }
        Ok(ToyModel { w1, b1, w2, b2 })
    }

    /// Parameters in entry order `W1, b1, W2, b2`, each row-major.
    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 4] {
        [
            (W1, self.w1.as_mut_slice()),
            (B1, self.b1.as_mut_slice()),
            (W2, self.w2.as_mut_slice()),
            (B2, self.b2.as_mut_slice()),
        ]
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub hidden: DMatrix<f64>,
    pub logits: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl ModelGrads {
    /// Weight gradient of a matrix layer by name.
    pub fn weight(&self, layer: &str) -> Option<&DMatrix<f64>> {
        match layer {
            W1 => Some(&self.w1),
            W2 => Some(&self.w2),
            _ => None,
        }
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 4] {
        [
            (W1, self.w1.as_slice()),
            (B1, self.b1.as_slice()),
            (W2, self.w2.as_slice()),
            (B2, self.b2.as_slice()),
        ]
    }
}

pub fn forward(model: &ToyModel, x: &DMatrix<f64>) -> Result<ForwardCache> {
    if x.ncols() != model.input_dim() {
        return Err(BoltError::dimension(format!(
            "batch has {} features, model expects {}",
            x.ncols(),
            model.input_dim()
        )));
    }
    let mut hidden = x * model.w1.transpose();
    for mut row in hidden.row_iter_mut() {
        for (h, b) in row.iter_mut().zip(model.b1.iter()) {
            *h = (*h + b).tanh();
        }
    }
    let mut logits = &hidden * model.w2.transpose();
    for mut row in logits.row_iter_mut() {
        row += model.b2.transpose();
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(BoltError::numeric("non-finite logits in forward pass"));
    }
    Ok(ForwardCache { hidden, logits })
}

pub fn logits(model: &ToyModel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(forward(model, x)?.logits)
}

/// Gradients of a loss given `dL/dlogits`.
pub fn backward(model: &ToyModel, x: &DMatrix<f64>, cache: &ForwardCache, dlogits: &DMatrix<f64>) -> ModelGrads {
    let w2 = dlogits.transpose() * &cache.hidden;
    let b2 = row_sums(dlogits);
    let mut dpre = dlogits * &model.w2;
    dpre.zip_apply(&cache.hidden, |g, h| *g *= 1.0 - h * h);
    let w1 = dpre.transpose() * x;
    let b1 = row_sums(&dpre);
    ModelGrads { w1, b1, w2, b2 }
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(m.ncols());
    for row in m.row_iter() {
        out += row.transpose();
    }
    out
}

/// Row-wise softmax, stabilized by subtracting the row max.
pub fn softmax_rows(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = z.clone();
    for mut row in p.row_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row.unscale_mut(sum);
    }
    p
}

/// `log Σ exp(z)` of one row.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy against hard labels and its gradient in the logits.
pub fn cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let n = logits.nrows();
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(i).iter().copied().collect();
        loss += log_sum_exp(&row) - row[y];
        grad[(i, y)] -= 1.0;
    }
    grad.unscale_mut(n as f64);
    (loss / n as f64, grad)
}

/// Loss and gradients of the mean cross-entropy over a labeled batch.
pub fn mlp_forward_backward(model: &ToyModel, x: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, ModelGrads)> {
    if x.nrows() == 0 {
        return Err(BoltError::validation("empty batch"));
    }
    if labels.len() != x.nrows() {
        return Err(BoltError::dimension(format!(
            "{} labels for {} rows",
            labels.len(),
            x.nrows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.classes()) {
        return Err(BoltError::validation(format!("label {bad} out of range")));
    }
    let cache = forward(model, x)?;
    let (loss, dlogits) = cross_entropy(&cache.logits, labels);
    if !loss.is_finite() {
        return Err(BoltError::numeric("non-finite loss"));
    }
    Ok((loss, backward(model, x, &cache, &dlogits)))
}

/// Argmax per row; ties go to the lower class index.
pub fn predict(logits: &DMatrix<f64>) -> Vec<usize> {
    logits
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &z) in row.iter().enumerate() {
                if z > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
