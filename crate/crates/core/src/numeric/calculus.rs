use crate::error::ensure;
use crate::{Error, Result};

/// Central finite-difference gradient of `f` at `theta`:
/// entry `i` is `(f(θ + h e_i) - f(θ - h e_i)) / 2h`.
pub fn central_diff<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    ensure!(
        h > 0.0 && h.is_finite(),
        InvalidArgument,
        "step must be positive, got {h}"
    );
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i} (f+ = {up}, f- = {down})"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Numerically stable softmax (max-shifted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    ensure!(!logits.is_empty(), InvalidArgument, "softmax of an empty vector");
    ensure!(logits.iter().all(|v| v.is_finite()), NonFinite, "softmax logits");
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

/// `log softmax`, computed as `l - max - ln Σ exp(l - max)`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&l| l - lse).collect()
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}
