//! Evaluation metrics for long-tailed classifiers.
//!
//! Accuracy is averaged per class, split accuracies are reported for the
//! Many/Medium/Few groups, and two derived diagnostics summarize bias:
//! KL divergence of the predicted marginal from uniform, and the Spearman
//! correlation between classifier norms and training cardinalities.

use serde::{Deserialize, Serialize};

use crate::balancers::classifier_norms;
use crate::data::{assign_splits, ClassSplits, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor2;

/// Mean accuracy per cardinality group; `None` when a group is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` for classes without test examples.
    pub per_class_acc: Vec<Option<f64>>,
    pub mean_class_acc: f64,
    pub split_acc: SplitAccuracy,
    pub marginal_likelihood: Vec<f64>,
    /// Derived diagnostic: KL(marginal ‖ uniform).
    pub kl_to_uniform: f64,
    /// Derived diagnostic: Spearman(classifier norms, training counts);
    /// `None` when either vector is constant.
    pub norm_count_spearman: Option<f64>,
}

/// `correct_k / count_k` per class.
pub fn per_class_accuracy(
    predictions: &[usize],
    labels: &[usize],
    k: usize,
) -> Result<Vec<Option<f64>>> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= k {
            return Err(Error::invalid(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        total[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    Ok(correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
        .collect())
}

/// Mean over classes that have test examples.
pub fn mean_class_accuracy(per_class: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().sum::<f64>() / present.len() as f64
}

pub fn split_accuracy(per_class: &[Option<f64>], splits: &ClassSplits) -> Result<SplitAccuracy> {
    if per_class.len() != splits.split_of.len() {
        return Err(Error::invalid(format!(
            "{} per-class accuracies for {} split tags",
            per_class.len(),
            splits.split_of.len()
        )));
    }
    let mean_of = |which: Split| {
        let vals: Vec<f64> = per_class
            .iter()
            .zip(&splits.split_of)
            .filter(|(_, &s)| s == which)
            .filter_map(|(a, _)| *a)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Ok(SplitAccuracy {
        many: mean_of(Split::Many),
        medium: mean_of(Split::Medium),
        few: mean_of(Split::Few),
    })
}

/// Column means of a row-stochastic matrix.
pub fn marginal_likelihood(probs: &Tensor2) -> Result<Vec<f64>> {
    let (n, k) = probs.shape();
    if n == 0 {
        return Err(Error::invalid("marginal likelihood of zero rows"));
    }
    let mut acc = vec![0.0; k];
    for (i, row) in probs.row_iter().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::invalid(format!(
                "row {i} is not a probability vector (sum {s})"
            )));
        }
        for (a, &p) in acc.iter_mut().zip(row) {
            *a += p;
        }
    }
    Ok(acc.into_iter().map(|a| a / n as f64).collect())
}

/// `Σ p_k log(p_k K)` with `0 log 0 = 0`.
pub fn kl_to_uniform(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::invalid("empty probability vector"));
    }
    if let Some(v) = p.iter().find(|&&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid(format!("invalid probability entry {v}")));
    }
    let k = p.len() as f64;
    Ok(p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * (v * k).ln())
        .sum::<f64>()
        .max(0.0))
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            ranks[t] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(format!(
            "spearman needs two equal-length vectors of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedCorrelation("one input is constant".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Full metrics of `model` on `test`, with splits and the norm diagnostic
/// taken from the training cardinalities.
pub fn evaluate(
    model: &Model,
    test: &LabeledDataset,
    train_counts: &[usize],
    include_bias: bool,
) -> Result<MetricsReport> {
    let k = test.num_classes();
    if train_counts.len() != k {
        return Err(Error::invalid(format!(
            "{} training counts for {k} classes",
            train_counts.len()
        )));
    }
    let logits = model.forward(test.features())?;
    if logits.cols() != k {
        return Err(Error::invalid(format!(
            "model emits {} logits for {k} classes",
            logits.cols()
        )));
    }
    let preds = logits.argmax_rows();
    let per_class_acc = per_class_accuracy(&preds, test.labels(), k)?;
    let mean_class_acc = mean_class_accuracy(&per_class_acc);
    let split_acc = split_accuracy(&per_class_acc, &assign_splits(train_counts))?;
    let marginal = marginal_likelihood(&logits.softmax_rows())?;
    let kl = kl_to_uniform(&marginal)?;
    let counts: Vec<f64> = train_counts.iter().map(|&c| c as f64).collect();
    let norm_count_spearman = spearman(&classifier_norms(model, include_bias), &counts).ok();
    Ok(MetricsReport {
        per_class_acc,
        mean_class_acc,
        split_acc,
        marginal_likelihood: marginal,
        kl_to_uniform: kl,
        norm_count_spearman,
    })
}

/// Per-class CSV: `class_id,train_count,accuracy,marginal_likelihood`.
pub fn write_per_class_csv<W: std::io::Write>(
    report: &MetricsReport,
    train_counts: &[usize],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class_id", "train_count", "accuracy", "marginal_likelihood"])?;
    for (k, (acc, ml)) in report
        .per_class_acc
        .iter()
        .zip(&report.marginal_likelihood)
        .enumerate()
    {
        w.write_record([
            k.to_string(),
            train_counts.get(k).map_or(String::new(), |c| c.to_string()),
            acc.map_or(String::new(), |a| a.to_string()),
            ml.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
