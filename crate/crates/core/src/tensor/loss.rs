use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
///
/// `logits` is `(n, classes, 1, 1)`. Returns the loss and its gradient with respect to the
/// logits, `(softmax − onehot)/n`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    softmax_cross_entropy_weighted(logits, labels, None)
}

/// As [`softmax_cross_entropy`], with each sample's term scaled by the weight of its
/// true class.
pub fn softmax_cross_entropy_weighted(
    logits: &Tensor,
    labels: &[usize],
    class_weights: Option<&[f32]>,
) -> Result<(f32, Tensor)> {
    let s = logits.shape();
    let classes = s.sample();
    if labels.len() != s.n {
        return Err(Error::shape(format!("{} labels for batch of {}", labels.len(), s.n)));
    }
    if let Some(w) = class_weights {
        if w.len() != classes {
            return Err(Error::shape(format!("{} class weights for {classes} classes", w.len())));
        }
    }
    let mut grad = Tensor::zeros_unchecked(Shape::new(s.n, s.c, s.h, s.w));
    let mut total = 0.0f64;
    let inv_n = 1.0 / s.n as f64;
    for (n, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::invalid(format!("label {label} out of range for {classes} classes")));
        }
        let row = logits.sample(n);
        if let Some(i) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "logits".into(),
                detail: format!("sample {n}, class {i}"),
            });
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let denom: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_denom = denom.ln();
        let weight = class_weights.map_or(1.0, |w| w[label] as f64);
        total += weight * (log_denom - (row[label] as f64 - max));
        let g = grad.sample_mut(n);
        for (k, &v) in row.iter().enumerate() {
            let p = ((v as f64 - max) - log_denom).exp();
            let target = if k == label { 1.0 } else { 0.0 };
            g[k] = (weight * (p - target) * inv_n) as f32;
        }
    }
    Ok(((total * inv_n) as f32, grad))
}
