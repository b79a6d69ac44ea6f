//! Accuracy and one-vs-rest ROC AUC.

use serde::{Deserialize, Serialize};

use crate::data::{collect_batch, Dataset};
use crate::error::{Error, Result};
use crate::models::{Mode, Model};
use crate::tensor::{Graph, Scalar};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `scores` (`[N × K]`, row-major) whose argmax equals
/// the label.
pub fn accuracy(scores: &[f64], labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = scores
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Area under the ROC curve of a binary problem, counting tied scores as
/// half (midranks). `None` when either class is absent.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&o| positive[o]).count() as f64;
        i = j + 1;
    }
    let p = n_pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n_neg as f64))
}

/// One-vs-rest AUC per class plus micro and macro averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocAuc {
    /// `None` for classes absent from the labels (or present in all of them).
    pub per_class: Vec<Option<f64>>,
    /// Every (sample, class) pair pooled into one binary problem.
    pub micro: Option<f64>,
    /// Mean over defined classes.
    pub macro_avg: Option<f64>,
}

/// `probs` is `[N × K]`, row-major, rows summing to one.
pub fn roc_auc(probs: &[f64], labels: &[usize], k: usize) -> Result<RocAuc> {
    let n = labels.len();
    if k == 0 || probs.len() != n * k {
        return Err(Error::Data(format!(
            "{} scores do not form {n} rows of {k} classes",
            probs.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    for (i, row) in probs.chunks(k).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-4 || row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("score row {i} sums to {s}, not 1")));
        }
    }
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().skip(c).step_by(k).copied().collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            binary_auc(&scores, &pos)
        })
        .collect();
    let pos: Vec<bool> = labels.iter().flat_map(|&y| (0..k).map(move |c| c == y)).collect();
    let micro = binary_auc(probs, &pos);
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_avg = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(RocAuc {
        per_class,
        micro,
        macro_avg,
    })
}

/// Class probabilities of a model over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub num_classes: usize,
    /// `[N × K]` softmax outputs, row-major.
    pub probs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        accuracy(&self.probs, &self.labels, self.num_classes)
    }

    pub fn roc_auc(&self) -> Result<RocAuc> {
        roc_auc(&self.probs, &self.labels, self.num_classes)
    }
}

/// Runs `model` in evaluation mode over `data`.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let k = model.config().num_classes;
    if data.num_classes != k {
        return Err(Error::Data(format!(
            "model predicts {k} classes, dataset has {}",
            data.num_classes
        )));
    }
    let mut probs = Vec::with_capacity(data.len() * k);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = collect_batch::<T>(data, chunk);
        let g = Graph::new();
        let out = model.forward(&g, g.constant(batch.images), Mode::Eval, false)?;
        for row in out.logits.value().data().chunks(k) {
            let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            probs.extend(exp.iter().map(|e| e / z));
        }
    }
    Ok(Evaluation {
        num_classes: k,
        probs,
        labels: data.labels(),
    })
}
