//! Softmax and cross-entropy against an arbitrary target distribution.
//!
//! One-hot, uniformly smoothed and adaptive targets all go through the same
//! [`cross_entropy`]; the specialised loss formulas are the general one
//! evaluated at those targets. Everything here is `f64`.

use crate::labeling::{argmax, LabelVector};
use crate::{Error, Result};

fn check_finite(z: &[f64]) -> Result<()> {
    if z.is_empty() {
        return Err(Error::invalid("empty logit vector"));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "non-finite logit at index {i}: {}",
            z[i]
        )));
    }
    Ok(())
}

fn check_dims(z: &[f64], label: &LabelVector) -> Result<()> {
    if z.len() != label.len() {
        return Err(Error::invalid(format!(
            "logits have {} classes, label has {}",
            z.len(),
            label.len()
        )));
    }
    Ok(())
}

fn max_of(z: &[f64]) -> f64 {
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    check_finite(z)?;
    let m = max_of(z);
    let mut e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= s);
    Ok(e)
}

/// `z - logsumexp(z)`, evaluated without forming the probabilities.
pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    check_finite(z)?;
    let m = max_of(z);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    Ok(z.iter().map(|&v| v - lse).collect())
}

pub fn cross_entropy(z: &[f64], label: &LabelVector) -> Result<f64> {
    check_dims(z, label)?;
    let logp = log_softmax(z)?;
    let loss = -label
        .probs()
        .iter()
        .zip(&logp)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &lp)| t * lp)
        .sum::<f64>();
    Ok(loss.max(0.0))
}

/// Gradient of [`cross_entropy`] in the logits: `softmax(z) - label`.
pub fn grad_logits(z: &[f64], label: &LabelVector) -> Result<Vec<f64>> {
    check_dims(z, label)?;
    let p = softmax(z)?;
    Ok(p.iter().zip(label.probs()).map(|(a, b)| a - b).collect())
}

/// Loss and gradient in one pass.
pub fn cross_entropy_with_grad(z: &[f64], label: &LabelVector) -> Result<(f64, Vec<f64>)> {
    Ok((cross_entropy(z, label)?, grad_logits(z, label)?))
}

/// Top-1 summary of a probability vector: `(argmax, max)`, ties to the lowest
/// class id.
pub fn top1(probs: &[f64]) -> (usize, f64) {
    let i = argmax(probs);
    (i, probs[i])
}
