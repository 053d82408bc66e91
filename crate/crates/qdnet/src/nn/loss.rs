//! Softmax and cross-entropy over probability distributions.

use crate::error::{QdError, Result};
use crate::tensor::Tensor;

const PROB_FLOOR: f64 = 1e-12;

/// Row-wise softmax, stabilized by subtracting the row max.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(QdError::InvalidShape(format!(
            "softmax expects [N,C], got {:?}",
            logits.shape()
        )));
    }
    if logits.data().iter().any(|x| !x.is_finite()) {
        return Err(QdError::Numeric("non-finite logits".into()));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![0.0f32; n * c];
    for row in 0..n {
        let r = &logits.data()[row * c..(row + 1) * c];
        let max = r.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = r.iter().map(|&x| (x as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (o, e) in out[row * c..(row + 1) * c].iter_mut().zip(&exps) {
            *o = (e / sum) as f32;
        }
    }
    Tensor::new(vec![n, c], out)
}

/// Mean over the batch of -sum_j target[j] * log(probs[j]); probabilities are
/// clamped at 1e-12 before the log.
pub fn cross_entropy(target_dist: &Tensor, probs: &Tensor) -> Result<f64> {
    if target_dist.shape() != probs.shape() || target_dist.shape().len() != 2 {
        return Err(QdError::ShapeMismatch {
            context: "cross_entropy".into(),
            lhs: target_dist.shape().to_vec(),
            rhs: probs.shape().to_vec(),
        });
    }
    if target_dist.data().iter().any(|x| x.is_nan()) || probs.data().iter().any(|x| x.is_nan()) {
        return Err(QdError::Numeric("NaN in cross_entropy input".into()));
    }
    let (n, c) = (target_dist.shape()[0], target_dist.shape()[1]);
    let mut total = 0.0f64;
    for row in 0..n {
        for j in 0..c {
            let t = target_dist.data()[row * c + j] as f64;
            if t == 0.0 {
                continue;
            }
            let p = (probs.data()[row * c + j] as f64).max(PROB_FLOOR);
            total -= t * p.ln();
        }
    }
    Ok(total / n as f64)
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(QdError::Config(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let n = labels.len();
    let mut data = vec![0.0f32; n * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * num_classes + l] = 1.0;
    }
    Tensor::new(vec![n, num_classes], data)
}
