//! Weight-balancing regularizers: weight decay, MaxNorm and unit-norm
//! projections, and post-hoc τ / L2 normalization of classifier filters.
//!
//! A classifier filter θ_k is row `k` of the final layer's weight. Biases
//! are excluded from norms and projections unless `include_bias` is set,
//! in which case θ_k is the row with `b_k` appended.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    #[default]
    None,
    MaxNorm,
    L2Unit,
}

/// Which trainable layers weight decay touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayScope {
    /// Final-layer weights only.
    ClassifierOnly,
    /// Weights and biases of every trainable layer.
    #[default]
    AllLayers,
}

/// Evaluation-time transform of the classifier filters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostHoc {
    #[default]
    None,
    L2,
    Tau(f64),
}

impl std::str::FromStr for PostHoc {
    type Err = Error;

    /// Parses `none`, `l2` or `tau:<value>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PostHoc::None),
            "l2" => Ok(PostHoc::L2),
            _ => {
                let v = s
                    .strip_prefix("tau:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| *v >= 0.0 && v.is_finite())
                    .ok_or_else(|| {
                        Error::invalid(format!(
                            "post-hoc mode must be none, l2 or tau:<v>, got {s:?}"
                        ))
                    })?;
                Ok(PostHoc::Tau(v))
            }
        }
    }
}

impl std::fmt::Display for PostHoc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PostHoc::None => write!(f, "none"),
            PostHoc::L2 => write!(f, "l2"),
            PostHoc::Tau(t) => write!(f, "tau:{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalancerConfig {
    /// Weight-decay coefficient of the `λ‖θ‖²` penalty.
    pub lambda: f64,
    /// MaxNorm radius; required when `constraint` is `max_norm`.
    pub delta: Option<f64>,
    pub constraint: ConstraintMode,
    pub scope: DecayScope,
    pub posthoc: PostHoc,
    pub include_bias: bool,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            delta: None,
            constraint: ConstraintMode::None,
            scope: DecayScope::AllLayers,
            posthoc: PostHoc::None,
            include_bias: false,
        }
    }
}

impl BalancerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::invalid(format!("delta must be > 0, got {d}")));
            }
        }
        if self.constraint == ConstraintMode::MaxNorm && self.delta.is_none() {
            return Err(Error::invalid("max_norm constraint requires delta"));
        }
        if let PostHoc::Tau(t) = self.posthoc {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!("tau must be >= 0, got {t}")));
            }
        }
        Ok(())
    }
}

/// Gradient of `λ‖θ‖²`, i.e. `2λθ`.
pub fn weight_decay_grad(theta: &Tensor2, lambda: f64) -> Tensor2 {
    let mut g = theta.clone();
    for v in g.data_mut() {
        *v *= 2.0 * lambda;
    }
    g
}

/// `λ‖θ‖²`.
pub fn weight_decay_penalty(theta: &Tensor2, lambda: f64) -> f64 {
    lambda * theta.sum_squares()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales in place by `min(1, δ/‖θ‖)`. Filters already within one part
/// in 1e12 of the radius are left alone, which makes the projection
/// bitwise idempotent.
pub fn maxnorm_project_in_place(theta: &mut [f64], delta: f64) {
    let norm = l2(theta);
    if norm > delta * (1.0 + 1e-12) {
        let s = delta / norm;
        for v in theta.iter_mut() {
            *v *= s;
        }
    }
}

pub fn maxnorm_project(theta: &[f64], delta: f64) -> Vec<f64> {
    let mut out = theta.to_vec();
    maxnorm_project_in_place(&mut out, delta);
    out
}

/// `θ/‖θ‖`. Fails on the zero vector.
pub fn l2unit_project(theta: &[f64]) -> Result<Vec<f64>> {
    let mut out = theta.to_vec();
    unit_in_place(&mut out).ok_or(Error::DegenerateFilter { class: 0 })?;
    Ok(out)
}

fn unit_in_place(theta: &mut [f64]) -> Option<()> {
    let norm = l2(theta);
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    for v in theta.iter_mut() {
        *v /= norm;
    }
    Some(())
}

/// Applies `f` to each filter of `layer`, with the bias entry appended
/// when `include_bias` is set, then writes the result back.
fn for_each_filter(
    layer: &mut Layer,
    include_bias: bool,
    mut f: impl FnMut(usize, &mut [f64]) -> Result<()>,
) -> Result<()> {
    let cols = layer.weight.cols();
    let mut buf = vec![0.0; cols + 1];
    for k in 0..layer.weight.rows() {
        let len = if include_bias { cols + 1 } else { cols };
        buf[..cols].copy_from_slice(layer.weight.row(k));
        buf[cols] = layer.bias.get(0, k);
        f(k, &mut buf[..len])?;
        layer.weight.row_mut(k).copy_from_slice(&buf[..cols]);
        if include_bias {
            layer.bias.set(0, k, buf[cols]);
        }
    }
    Ok(())
}

/// MaxNorm on every filter of `layer`.
pub fn maxnorm_layer(layer: &mut Layer, delta: f64, include_bias: bool) {
    for_each_filter(layer, include_bias, |_, f| {
        maxnorm_project_in_place(f, delta);
        Ok(())
    })
    .expect("maxnorm projection is infallible");
}

/// Unit-norm projection on every filter of `layer`.
pub fn l2unit_layer(layer: &mut Layer, include_bias: bool) -> Result<()> {
    for_each_filter(layer, include_bias, |k, f| {
        unit_in_place(f).ok_or(Error::DegenerateFilter { class: k })
    })
}

/// `θ'_k = θ_k / ‖θ_k‖^τ` for every row of `filters`. `τ = 0` returns the
/// input unchanged.
pub fn tau_normalize(filters: &Tensor2, tau: f64) -> Result<Tensor2> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("tau must be >= 0, got {tau}")));
    }
    let mut out = filters.clone();
    if tau == 0.0 {
        return Ok(out);
    }
    for k in 0..out.rows() {
        let row = out.row_mut(k);
        let norm = l2(row);
        if norm == 0.0 {
            return Err(Error::DegenerateFilter { class: k });
        }
        let s = norm.powf(-tau);
        for v in row.iter_mut() {
            *v *= s;
        }
    }
    Ok(out)
}

/// `θ'_k = θ_k / ‖θ_k‖`.
pub fn posthoc_l2(filters: &Tensor2) -> Result<Tensor2> {
    tau_normalize(filters, 1.0)
}

/// Returns a copy of `model` whose classifier carries the post-hoc
/// transform. The input model is not modified.
pub fn apply_posthoc(model: &Model, posthoc: PostHoc, include_bias: bool) -> Result<Model> {
    let tau = match posthoc {
        PostHoc::None => return Ok(model.clone()),
        PostHoc::L2 => 1.0,
        PostHoc::Tau(t) => t,
    };
    let mut out = model.clone();
    let Some(head) = out.classifier_mut() else {
        return Ok(out);
    };
    if !include_bias {
        head.weight = tau_normalize(&head.weight, tau)?;
        return Ok(out);
    }
    let (k, d) = head.weight.shape();
    let mut joined = Tensor2::zeros(k, d + 1);
    for r in 0..k {
        joined.row_mut(r)[..d].copy_from_slice(head.weight.row(r));
        joined.set(r, d, head.bias.get(0, r));
    }
    let joined = tau_normalize(&joined, tau)?;
    for r in 0..k {
        head.weight.row_mut(r).copy_from_slice(&joined.row(r)[..d]);
        head.bias.set(0, r, joined.get(r, d));
    }
    Ok(out)
}

/// `‖θ_k‖₂` for each class filter of the final layer.
pub fn classifier_norms(model: &Model, include_bias: bool) -> Vec<f64> {
    let Some(head) = model.classifier() else {
        return Vec::new();
    };
    (0..head.out_dim())
        .map(|k| {
            let w = l2(head.weight.row(k));
            if include_bias {
                (w * w + head.bias.get(0, k).powi(2)).sqrt()
            } else {
                w
            }
        })
        .collect()
}

/// Filter-norm summary for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormStats {
    pub layer: usize,
    /// Per-filter norms, largest first.
    pub sorted_norms: Vec<f64>,
    pub mean: f64,
    /// Population variance of the norms.
    pub variance: f64,
}

pub fn layer_norm_stats(model: &Model) -> Vec<LayerNormStats> {
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let mut norms: Vec<f64> = layer.weight.row_iter().map(l2).collect();
            norms.sort_by(|a, b| b.total_cmp(a));
            let n = norms.len().max(1) as f64;
            let mean = norms.iter().sum::<f64>() / n;
            let variance = norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            LayerNormStats {
                layer: i,
                sorted_norms: norms,
                mean,
                variance,
            }
        })
        .collect()
}
