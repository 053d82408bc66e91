//! Layer graph, forward/backward with per-layer analytic gradients, SGD with
//! momentum, and the teacher / student model families.

mod layer;
mod loss;
mod model;
mod optim;

pub use layer::{
    conv_backward, dense_backward, dense_forward, BatchNormLayer, Conv2dLayer, DenseLayer,
    FusedConvLayer, Layer,
    LayerCache, Mode,
};
pub use loss::{cross_entropy, one_hot, softmax};
pub use model::{build_student, build_teacher, Model, ModelFamily};
pub use optim::{multistep_lr, sgd_step, SgdOptimizer};

use crate::error::{QdError, Result};

/// Training hyperparameters; defaults are the paper's recipe scaled to desk
/// runtime (epochs 60, milestones {21,30,45}, freeze at 45).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub milestones: Vec<usize>,
    pub lr_gamma: f32,
    pub dropout_p: f32,
    pub freeze_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![36, 50],
            lr_gamma: 0.2,
            dropout_p: 0.5,
            freeze_epoch: 60,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(QdError::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(QdError::Config("momentum must be in [0,1)".into()));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(QdError::Config("lr_gamma must be in (0,1]".into()));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(QdError::Config(
                "milestones must be strictly increasing".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(QdError::Config("dropout_p must be in [0,1)".into()));
        }
        if self.batch_size == 0 {
            return Err(QdError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}
