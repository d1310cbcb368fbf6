use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-wise softmax of an N×k logit matrix, max-subtracted.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.item_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Mean negative log-likelihood (nats) of `labels` under the rows of `probs`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let k = probs.item_len();
    if probs.batch_len() != labels.len() {
        return Err(Error::input(format!(
            "{} probability rows but {} labels",
            probs.batch_len(),
            labels.len()
        )));
    }
    let terms = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= k {
                return Err(Error::input(format!("label {y} out of range for {k} classes")));
            }
            Ok(0.0 - probs.item(i)[y].max(PROB_FLOOR).ln())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&terms) / labels.len() as f64)
}

/// Gradient of the mean cross-entropy with respect to the logits,
/// `(p − onehot(y)) / N` per row.
///
/// This is the derivative of the log-softmax form `logsumexp(z) − z_y`, which
/// equals [`cross_entropy`] wherever the true-class probability is above
/// [`PROB_FLOOR`].
pub fn cross_entropy_logit_grad(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let k = probs.item_len();
    let n = labels.len();
    let mut g = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::input(format!("label {y} out of range for {k} classes")));
        }
        let row = g.item_mut(i);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }
    Ok(g)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Pairwise (cascade) summation. The result depends only on the multiset
/// order given, with O(log n) error growth.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 8;
    if values.len() <= BLOCK {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Pairwise mean over values sorted ascending, which makes the result
/// independent of the input order.
pub fn order_free_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(pairwise_sum(&sorted) / sorted.len() as f64)
}
