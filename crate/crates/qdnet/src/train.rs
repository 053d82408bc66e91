//! Training loops: plain / KD float training, KD-QAT training, and the
//! quantized distillation pipeline that ends in an integer model.
//!
//! All loops are deterministic for a fixed `TrainConfig::seed`: the sampler,
//! augmentation, dropout, and initialization all derive from it, and the
//! parallel kernels reduce in a fixed order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{make_batch, Dataset, DatasetSplit, ImbalancedSampler};
use crate::distill::{kd_loss, kd_loss_grad, KDConfig};
use crate::error::{QdError, Result};
use crate::int8::{quantized_forward, QuantizedModel};
use crate::metrics::mean_per_class_accuracy;
use crate::nn::{multistep_lr, Model, SgdOptimizer, TrainConfig};
use crate::quant::{convert_to_int8, fuse_layers, QatModel};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 64;

/// One line of the machine-readable training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub val_mpca: f64,
}

impl EpochLog {
    pub fn format(&self) -> String {
        format!(
            "epoch={} lr={:.6} train_loss={:.6} val_mpca={:.6}",
            self.epoch, self.lr, self.train_loss, self.val_mpca
        )
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    (0..n)
        .map(|row| {
            let r = &logits.data()[row * c..(row + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Center-crop predictions over a whole split with the given forward pass.
pub fn predictions_with<F>(split: &DatasetSplit, mut forward: F) -> Result<Vec<usize>>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: eval crop is deterministic
    let mut preds = Vec::with_capacity(split.len());
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (batch, _) = make_batch(split, chunk, false, &mut rng)?;
        let logits = forward(&batch)?;
        preds.extend(argmax_rows(&logits));
    }
    Ok(preds)
}

fn eval_split<F>(split: &DatasetSplit, num_classes: usize, forward: F) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let preds = predictions_with(split, forward)?;
    mean_per_class_accuracy(&preds, &split.labels, num_classes)
}

/// Mean per-class accuracy of a float model on a split (center crop).
pub fn evaluate_float(model: &Model, split: &DatasetSplit) -> Result<f64> {
    eval_split(split, model.num_classes, |b| model.forward_eval(b))
}

/// Mean per-class accuracy of the QAT simulation on a split.
pub fn evaluate_qat(model: &QatModel, split: &DatasetSplit) -> Result<f64> {
    eval_split(split, model.num_classes, |b| model.forward_eval(b))
}

/// Mean per-class accuracy of the integer engine on a split.
pub fn evaluate_quantized(model: &QuantizedModel, split: &DatasetSplit) -> Result<f64> {
    eval_split(split, model.num_classes, |b| quantized_forward(model, b))
}

fn check_kd_setup(
    teacher: Option<&Model>,
    num_classes: usize,
    kd: &KDConfig,
) -> Result<()> {
    match teacher {
        Some(t) if t.num_classes != num_classes => Err(QdError::Config(format!(
            "teacher has {} classes, student has {num_classes}",
            t.num_classes
        ))),
        None if kd.beta() > 0.0 => Err(QdError::Config(
            "KD loss with beta > 0 requires a teacher model".into(),
        )),
        _ => Ok(()),
    }
}

/// Loss and student-logit gradient for one batch; with no teacher (beta = 0)
/// the student logits stand in for the unused teacher term.
fn batch_loss_grad(
    teacher: Option<&Model>,
    batch: &Tensor,
    student_logits: &Tensor,
    labels: &[usize],
    kd: &KDConfig,
) -> Result<(f64, Tensor)> {
    let teacher_logits = match teacher {
        Some(t) if kd.beta() > 0.0 => t.forward_eval(batch)?,
        _ => student_logits.clone(),
    };
    let loss = kd_loss(&teacher_logits, student_logits, labels, kd)?;
    let grad = kd_loss_grad(&teacher_logits, student_logits, labels, kd)?;
    Ok((loss, grad))
}

/// Float training with plain cross entropy (`KDConfig::hard_only`) or the KD
/// loss against a frozen teacher. Returns the per-epoch log.
pub fn train_float(
    model: &mut Model,
    teacher: Option<&Model>,
    kd: &KDConfig,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut sink: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    check_kd_setup(teacher, model.num_classes, kd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sampler = ImbalancedSampler::new(&dataset.train.labels, model.num_classes)?;
    let mut opt = SgdOptimizer::new(&model.params(), cfg.momentum, cfg.weight_decay);
    let steps = dataset.train.len().div_ceil(cfg.batch_size);
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if epoch == cfg.freeze_epoch {
            model.freeze_batchnorm();
        }
        let lr = multistep_lr(cfg.lr, epoch, &cfg.milestones, cfg.lr_gamma);
        let mut loss_sum = 0.0f64;
        for _ in 0..steps {
            let indices = sampler.batch(cfg.batch_size, &mut rng);
            let (batch, labels) = make_batch(&dataset.train, &indices, true, &mut rng)?;
            let (logits, caches) = model.forward_train(&batch, &mut rng)?;
            let (loss, lg) = batch_loss_grad(teacher, &batch, &logits, &labels, kd)?;
            loss_sum += loss;
            let grads = model.backward(&caches, &lg)?;
            opt.step(model.params_mut(), &grads, lr)?;
        }
        let log = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / steps as f64,
            val_mpca: evaluate_float(model, &dataset.val)?,
        };
        sink(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// QAT training of a fused student, optionally against a teacher (KD-QAT).
/// Observers freeze at `cfg.freeze_epoch`.
pub fn train_qat(
    qat: &mut QatModel,
    teacher: Option<&Model>,
    kd: &KDConfig,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut sink: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    check_kd_setup(teacher, qat.num_classes, kd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sampler = ImbalancedSampler::new(&dataset.train.labels, qat.num_classes)?;
    let mut opt = SgdOptimizer::new(&qat.params(), cfg.momentum, cfg.weight_decay);
    let steps = dataset.train.len().div_ceil(cfg.batch_size);
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if epoch == cfg.freeze_epoch {
            qat.freeze_observers();
        }
        let lr = multistep_lr(cfg.lr, epoch, &cfg.milestones, cfg.lr_gamma);
        let mut loss_sum = 0.0f64;
        for _ in 0..steps {
            let indices = sampler.batch(cfg.batch_size, &mut rng);
            let (batch, labels) = make_batch(&dataset.train, &indices, true, &mut rng)?;
            let (logits, caches) = qat.forward_train(&batch, &mut rng)?;
            let (loss, lg) = batch_loss_grad(teacher, &batch, &logits, &labels, kd)?;
            loss_sum += loss;
            let grads = qat.backward(&caches, &lg)?;
            opt.step(qat.params_mut(), &grads, lr)?;
        }
        let log = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / steps as f64,
            val_mpca: evaluate_qat(qat, &dataset.val)?,
        };
        sink(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// The full quantized distillation pipeline: fuse the student, attach
/// observers and fake quantization, train with the KD loss against the frozen
/// float teacher, and convert to the integer model.
pub fn quantized_distillation_train(
    teacher: &Model,
    student: &Model,
    dataset: &Dataset,
    kd: &KDConfig,
    cfg: &TrainConfig,
    sink: impl FnMut(&EpochLog),
) -> Result<(QuantizedModel, Vec<EpochLog>)> {
    if teacher.num_classes != student.num_classes {
        return Err(QdError::Config(format!(
            "teacher has {} classes, student has {}",
            teacher.num_classes, student.num_classes
        )));
    }
    let fused = fuse_layers(student)?;
    let mut qat = QatModel::from_fused(&fused)?;
    let logs = train_qat(&mut qat, Some(teacher), kd, dataset, cfg, sink)?;
    let qmodel = convert_to_int8(&qat)?;
    Ok((qmodel, logs))
}
