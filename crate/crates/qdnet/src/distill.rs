//! Knowledge-distillation loss, its analytic gradient, and the quantized
//! distillation training entry point.
//!
//! Loss: alpha * CE(y, softmax(z_s)) + beta * T^2 * CE(soft(z_t,T), soft(z_s,T))
//! with alpha = 1 - beta. The hard term uses the T=1 student softmax; the
//! printed-formula variant that tempers both terms is available behind
//! `literal_eq1`.

use crate::error::{QdError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KDConfig {
    beta: f64,
    temperature: f64,
    /// Apply the temperature-softened student distribution to the hard-label
    /// term as well (the formula exactly as printed).
    pub literal_eq1: bool,
}

impl KDConfig {
    pub fn new(beta: f64, temperature: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(QdError::Config(format!("beta must be in [0,1], got {beta}")));
        }
        if !(temperature > 0.0) {
            return Err(QdError::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            beta,
            temperature,
            literal_eq1: false,
        })
    }

    /// Plain cross-entropy training (no teacher term).
    pub fn hard_only() -> Self {
        Self {
            beta: 0.0,
            temperature: 1.0,
            literal_eq1: false,
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Student weight, fixed to 1 - beta.
    pub fn alpha(&self) -> f64 {
        1.0 - self.beta
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

fn check_logits(name: &str, z: &Tensor) -> Result<()> {
    if z.shape().len() != 2 {
        return Err(QdError::InvalidShape(format!(
            "{name} logits must be [N,C], got {:?}",
            z.shape()
        )));
    }
    if z.data().iter().any(|x| !x.is_finite()) {
        return Err(QdError::Numeric(format!("non-finite {name} logits")));
    }
    Ok(())
}

fn softmax_rows_f64(z: &Tensor, t: f64) -> Vec<f64> {
    let (n, c) = (z.shape()[0], z.shape()[1]);
    let mut out = vec![0.0f64; n * c];
    for row in 0..n {
        let r = &z.data()[row * c..(row + 1) * c];
        let max = r.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64 / t;
        let mut sum = 0.0f64;
        for j in 0..c {
            let e = (r[j] as f64 / t - max).exp();
            out[row * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            out[row * c + j] /= sum;
        }
    }
    out
}

/// Row-wise softmax of z/T (temperature-softened soft labels).
pub fn soft_labels(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    check_logits("soft_labels", logits)?;
    if !(temperature > 0.0) {
        return Err(QdError::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let p = softmax_rows_f64(logits, temperature);
    Tensor::new(
        logits.shape().to_vec(),
        p.iter().map(|&x| x as f32).collect(),
    )
}

fn validate_kd_inputs(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    labels: &[usize],
) -> Result<(usize, usize)> {
    check_logits("teacher", teacher_logits)?;
    check_logits("student", student_logits)?;
    if teacher_logits.shape() != student_logits.shape() {
        return Err(QdError::ShapeMismatch {
            context: "teacher vs student logits".into(),
            lhs: teacher_logits.shape().to_vec(),
            rhs: student_logits.shape().to_vec(),
        });
    }
    let (n, c) = (student_logits.shape()[0], student_logits.shape()[1]);
    if labels.len() != n {
        return Err(QdError::Config(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(QdError::Config(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    Ok((n, c))
}

/// Batch-mean KD loss. Teacher logits are constants: no gradient flows to
/// the teacher.
pub fn kd_loss(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    labels: &[usize],
    cfg: &KDConfig,
) -> Result<f64> {
    let (n, c) = validate_kd_inputs(teacher_logits, student_logits, labels)?;
    let t = cfg.temperature;
    let hard_t = if cfg.literal_eq1 { t } else { 1.0 };
    let ps_hard = softmax_rows_f64(student_logits, hard_t);
    let mut total = 0.0f64;
    for (row, &label) in labels.iter().enumerate() {
        total -= cfg.alpha() * ps_hard[row * c + label].max(1e-300).ln();
    }
    if cfg.beta > 0.0 {
        let pt = softmax_rows_f64(teacher_logits, t);
        let ps = softmax_rows_f64(student_logits, t);
        for i in 0..n * c {
            if pt[i] > 0.0 {
                total -= cfg.beta * t * t * pt[i] * ps[i].max(1e-300).ln();
            }
        }
    }
    Ok(total / n as f64)
}

/// d(kd_loss)/d(student logits):
/// alpha * (softmax(z_s) - one_hot(y)) + beta * T * (soft(z_s,T) - soft(z_t,T)),
/// divided by the batch size.
pub fn kd_loss_grad(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    labels: &[usize],
    cfg: &KDConfig,
) -> Result<Tensor> {
    let (n, c) = (student_logits.shape()[0], student_logits.shape()[1]);
    let grad = kd_loss_grad_f64(teacher_logits, student_logits, labels, cfg)?;
    Tensor::new(vec![n, c], grad.iter().map(|&g| g as f32).collect())
}

/// Full-precision gradient, for the finite-difference oracle and the
/// zero-row-sum property.
pub fn kd_loss_grad_f64(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    labels: &[usize],
    cfg: &KDConfig,
) -> Result<Vec<f64>> {
    let (n, c) = validate_kd_inputs(teacher_logits, student_logits, labels)?;
    let t = cfg.temperature;
    let hard_t = if cfg.literal_eq1 { t } else { 1.0 };
    let ps_hard = softmax_rows_f64(student_logits, hard_t);
    let mut grad = vec![0.0f64; n * c];
    for (row, &label) in labels.iter().enumerate() {
        for j in 0..c {
            let one = if j == label { 1.0 } else { 0.0 };
            grad[row * c + j] = cfg.alpha() * (ps_hard[row * c + j] - one) / hard_t;
        }
    }
    if cfg.beta > 0.0 {
        let pt = softmax_rows_f64(teacher_logits, t);
        let ps = softmax_rows_f64(student_logits, t);
        for i in 0..n * c {
            grad[i] += cfg.beta * t * (ps[i] - pt[i]);
        }
    }
    for g in &mut grad {
        *g /= n as f64;
    }
    Ok(grad)
}
