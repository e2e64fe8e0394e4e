use crate::error::ensure;
use crate::numeric::{log_softmax, Matrix};
use crate::{Error, Result};

/// Softmax cross-entropy of each row of `logits` against `labels`.
#[derive(Debug, Clone)]
pub struct CrossEntropy {
    /// Mean over rows.
    pub loss: f64,
    pub per_sample: Vec<f64>,
    /// Gradient of the mean loss with respect to the logits.
    pub d_logits: Matrix,
}

pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<CrossEntropy> {
    let (n, k) = logits.shape();
    ensure!(labels.len() == n, Shape, "{} labels for {n} rows", labels.len());
    ensure!(n > 0, InvalidArgument, "empty batch");
    logits.check_finite("logits")?;
    let mut per_sample = Vec::with_capacity(n);
    let mut d_logits = Matrix::zeros(n, k);
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidArgument(format!("label {y} outside [0, {k})")));
        }
        let lp = log_softmax(logits.row(r));
        per_sample.push(-lp[y]);
        for (c, (d, l)) in d_logits.row_mut(r).iter_mut().zip(&lp).enumerate() {
            *d = (l.exp() - if c == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok(CrossEntropy {
        loss: per_sample.iter().sum::<f64>() / n as f64,
        per_sample,
        d_logits,
    })
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(logits.row(r)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Index of the first maximal entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
