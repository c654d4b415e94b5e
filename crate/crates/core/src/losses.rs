//! Softmax cross-entropy and its class-balanced reweighting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Per-class loss weights, normalized to sum to the class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Effective-number weights: `u_k = (1−β)/(1−β^{n_k})`, rescaled so the
/// weights sum to `K`.
pub fn effective_number_weights(counts: &[usize], beta: f64) -> Result<ClassWeights> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::invalid(format!(
            "beta must lie in [0, 1), got {beta}"
        )));
    }
    if counts.is_empty() {
        return Err(Error::invalid("class counts are empty"));
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("class {k} has zero examples")));
    }
    // (1−β)/(1−β^n) written with ln_1p/exp_m1 so β close to 1 keeps precision
    let u: Vec<f64> = counts
        .iter()
        .map(|&n| {
            if beta == 0.0 {
                1.0
            } else {
                let log_beta = (-(1.0 - beta)).ln_1p();
                -(1.0 - beta) / (n as f64 * log_beta).exp_m1()
            }
        })
        .collect();
    let total: f64 = u.iter().sum();
    let k = counts.len() as f64;
    Ok(ClassWeights(u.iter().map(|v| k * v / total).collect()))
}

/// Mean over the batch of `w_{y_i} · −log softmax(logits_i)[y_i]` and its
/// exact gradient with respect to the logits.
pub fn weighted_softmax_ce(
    logits: &Tensor2,
    labels: &[usize],
    weights: &ClassWeights,
) -> Result<(f64, Tensor2)> {
    let (n, k) = logits.shape();
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if weights.len() != k {
        return Err(Error::invalid(format!(
            "{} class weights for {k} logit columns",
            weights.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!(
            "label {y} out of range for {k} classes"
        )));
    }
    if !logits.is_finite() {
        return Err(Error::numeric("logits contain non-finite values"));
    }
    if n == 0 {
        return Ok((0.0, Tensor2::zeros(0, k)));
    }

    let inv_n = 1.0 / n as f64;
    let mut grad = Tensor2::zeros(n, k);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&z| (z - m).exp()).sum();
        let lse = m + sum_exp.ln();
        let w = weights.0[y];
        total += w * (lse - row[y]);
        let g = grad.row_mut(i);
        for (j, (gj, &z)) in g.iter_mut().zip(row).enumerate() {
            let p = (z - lse).exp();
            *gj = w * inv_n * (p - if j == y { 1.0 } else { 0.0 });
        }
    }
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::numeric("loss is not finite"));
    }
    Ok((loss, grad))
}

/// Plain softmax cross-entropy (unit class weights).
pub fn cross_entropy(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    weighted_softmax_ce(logits, labels, &ClassWeights::uniform(logits.cols()))
}
