//! SGD with momentum and weight decay, and the multistep LR schedule.

use crate::error::{QdError, Result};
use crate::tensor::Tensor;

/// v <- momentum*v + (grad + weight_decay*param); param <- param - lr*v
pub fn sgd_step(
    param: &mut Tensor,
    velocity: &mut Tensor,
    grad: &Tensor,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(QdError::ShapeMismatch {
            context: "sgd_step".into(),
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    let p = param.data_mut();
    let v = velocity.data_mut();
    let g = grad.data();
    for i in 0..p.len() {
        v[i] = momentum * v[i] + (g[i] + weight_decay * p[i]);
        p[i] -= lr * v[i];
    }
    Ok(())
}

/// base_lr * gamma^(number of milestones <= epoch)
pub fn multistep_lr(base_lr: f32, epoch: usize, milestones: &[usize], gamma: f32) -> f32 {
    let hits = milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr * gamma.powi(hits as i32)
}

/// Momentum buffers aligned with a model's parameter list.
pub struct SgdOptimizer {
    pub velocity: Vec<Tensor>,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl SgdOptimizer {
    pub fn new(params: &[&Tensor], momentum: f32, weight_decay: f32) -> Self {
        Self {
            velocity: params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f32) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(QdError::Config(format!(
                "optimizer expects {} parameter tensors, got {} params / {} grads",
                self.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, v), g) in params.into_iter().zip(&mut self.velocity).zip(grads) {
            sgd_step(p, v, g, lr, self.momentum, self.weight_decay)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_descent() {
        let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut v = Tensor::zeros(vec![2]);
        let g = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        sgd_step(&mut p, &mut v, &g, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.data(), &[0.95, 2.05]);
    }

    #[test]
    fn zero_grad_no_motion() {
        let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut v = Tensor::zeros(vec![2]);
        let g = Tensor::zeros(vec![2]);
        sgd_step(&mut p, &mut v, &g, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0]);
    }

    #[test]
    fn momentum_two_step_sequence() {
        // hand computation: g=1 each step, momentum 0.9, lr 0.1, p0=0
        // v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
        let mut p = Tensor::zeros(vec![1]);
        let mut v = Tensor::zeros(vec![1]);
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        sgd_step(&mut p, &mut v, &g, 0.1, 0.9, 0.0).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-7);
        sgd_step(&mut p, &mut v, &g, 0.1, 0.9, 0.0).unwrap();
        assert!((p.data()[0] + 0.29).abs() < 1e-6);
    }

    #[test]
    fn multistep_schedule() {
        let ms = [70, 100, 150];
        assert_eq!(multistep_lr(0.05, 0, &ms, 0.2), 0.05);
        assert!((multistep_lr(0.05, 100, &ms, 0.2) - 0.002).abs() < 1e-9);
        assert_eq!(multistep_lr(0.05, 10, &[], 0.2), 0.05);
    }
}
