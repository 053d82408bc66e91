//! Subcommand implementations. Each returns a JSON report; per-epoch training
//! logs go to stderr as key=value lines.

use std::path::Path;

use qdnet::data::{make_batch, Dataset};
use qdnet::distill::KDConfig;
use qdnet::io::{self, LoadedModel};
use qdnet::metrics::{confusion_counts, mean_per_class_accuracy, per_class_accuracy};
use qdnet::nn::{build_student, build_teacher, Model};
use qdnet::quant::{calibrate, convert_to_int8, fuse_layers, QatModel};
use qdnet::train::{
    evaluate_float, evaluate_quantized, predictions_with, quantized_distillation_train,
    train_float, EpochLog,
};
use qdnet::{QdError, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::RunConfig;

fn log_epoch(log: &EpochLog) {
    eprintln!("{}", log.format());
}

fn logs_json(logs: &[EpochLog]) -> Value {
    Value::Array(
        logs.iter()
            .map(|l| {
                json!({
                    "epoch": l.epoch,
                    "lr": l.lr,
                    "train_loss": l.train_loss,
                    "val_mpca": l.val_mpca,
                })
            })
            .collect(),
    )
}

pub fn cmd_train_teacher(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let data = cfg.dataset()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut teacher = build_teacher(cfg.dataset.num_classes, cfg.train.dropout_p, &mut rng)?;
    let logs = train_float(
        &mut teacher,
        None,
        &KDConfig::hard_only(),
        &data,
        &cfg.train_config(),
        log_epoch,
    )?;
    let bytes = io::save_model(&teacher, out)?;
    let test_mpca = evaluate_float(&teacher, &data.test)?;
    Ok(json!({
        "command": "train-teacher",
        "model_path": out.display().to_string(),
        "size_bytes": bytes,
        "param_count": teacher.param_count(),
        "val_mpca": logs.last().map(|l| l.val_mpca),
        "test_mpca": test_mpca,
        "epochs": logs_json(&logs),
    }))
}

pub fn cmd_train_student(cfg: &RunConfig, kd_teacher: Option<&Path>, out: &Path) -> Result<Value> {
    let data = cfg.dataset()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut student = build_student(
        cfg.dataset.num_classes,
        cfg.model.width_multiplier,
        cfg.train.dropout_p,
        &mut rng,
    )?;
    let teacher = kd_teacher.map(io::load_float).transpose()?;
    let kd = match &teacher {
        Some(_) => cfg.kd_config()?,
        None => KDConfig::hard_only(),
    };
    let logs = train_float(
        &mut student,
        teacher.as_ref(),
        &kd,
        &data,
        &cfg.train_config(),
        log_epoch,
    )?;
    let bytes = io::save_model(&student, out)?;
    let test_mpca = evaluate_float(&student, &data.test)?;
    Ok(json!({
        "command": "train-student",
        "model_path": out.display().to_string(),
        "kd": kd_teacher.is_some(),
        "width_multiplier": cfg.model.width_multiplier,
        "size_bytes": bytes,
        "param_count": student.param_count(),
        "val_mpca": logs.last().map(|l| l.val_mpca),
        "test_mpca": test_mpca,
        "epochs": logs_json(&logs),
    }))
}

/// Full quantized distillation (Alg. 2). `student_init` continues from a
/// trained float student instead of a fresh initialization.
pub fn cmd_qat_distill(
    cfg: &RunConfig,
    teacher_path: &Path,
    student_init: Option<&Path>,
    out: &Path,
) -> Result<Value> {
    let data = cfg.dataset()?;
    let teacher = io::load_float(teacher_path)?;
    let student = match student_init {
        Some(p) => io::load_float(p)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            build_student(
                cfg.dataset.num_classes,
                cfg.model.width_multiplier,
                cfg.train.dropout_p,
                &mut rng,
            )?
        }
    };
    let (qmodel, logs) = quantized_distillation_train(
        &teacher,
        &student,
        &data,
        &cfg.kd_config()?,
        &cfg.train_config(),
        log_epoch,
    )?;
    let bytes = io::save_qmodel(&qmodel, out)?;
    let test_mpca = evaluate_quantized(&qmodel, &data.test)?;
    Ok(json!({
        "command": "qat-distill",
        "model_path": out.display().to_string(),
        "width_multiplier": qmodel.width_multiplier,
        "size_bytes": bytes,
        "val_mpca": logs.last().map(|l| l.val_mpca),
        "test_mpca": test_mpca,
        "epochs": logs_json(&logs),
    }))
}

/// Post-training quantization baseline: fuse a trained float student, run
/// calibration forwards over the train split to fill the observers, convert.
pub fn cmd_quantize(cfg: &RunConfig, student_path: &Path, out: &Path) -> Result<Value> {
    let data = cfg.dataset()?;
    let student = io::load_float(student_path)?;
    let fused = fuse_layers(&student)?;
    let mut qat = QatModel::from_fused(&fused)?;
    let batches = calibration_batches(&data, cfg.train.batch_size)?;
    calibrate(&mut qat, &batches)?;
    let qmodel = convert_to_int8(&qat)?;
    let bytes = io::save_qmodel(&qmodel, out)?;
    let test_mpca = evaluate_quantized(&qmodel, &data.test)?;
    Ok(json!({
        "command": "quantize",
        "model_path": out.display().to_string(),
        "size_bytes": bytes,
        "test_mpca": test_mpca,
    }))
}

fn calibration_batches(data: &Dataset, batch_size: usize) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: center crop
    let indices: Vec<usize> = (0..data.train.len()).collect();
    indices
        .chunks(batch_size.max(1))
        .map(|chunk| Ok(make_batch(&data.train, chunk, false, &mut rng)?.0))
        .collect()
}

pub fn cmd_eval(model_path: &Path, split_name: &str, cfg: &RunConfig) -> Result<Value> {
    let data = cfg.dataset()?;
    let split = match split_name {
        "train" => &data.train,
        "val" => &data.val,
        "test" => &data.test,
        other => {
            return Err(QdError::Config(format!(
                "unknown split {other:?}; expected train, val, or test"
            )))
        }
    };
    let (preds, quantized, num_classes) = match io::load(model_path)? {
        LoadedModel::Float(m) => {
            check_classes(m.num_classes, split.num_classes)?;
            (
                predictions_with(split, |b| m.forward_eval(b))?,
                false,
                m.num_classes,
            )
        }
        LoadedModel::Quantized(m) => {
            check_classes(m.num_classes, split.num_classes)?;
            (
                predictions_with(split, |b| qdnet::int8::quantized_forward(&m, b))?,
                true,
                m.num_classes,
            )
        }
    };
    let per_class = per_class_accuracy(&preds, &split.labels, num_classes)?;
    let mpca = mean_per_class_accuracy(&preds, &split.labels, num_classes)?;
    let confusion = confusion_counts(&preds, &split.labels, num_classes)?;
    Ok(json!({
        "command": "eval",
        "model_path": model_path.display().to_string(),
        "quantized": quantized,
        "split": split_name,
        "per_class_accuracy": per_class,
        "mean_per_class_accuracy": mpca,
        "confusion_counts": confusion,
    }))
}

fn check_classes(model_classes: usize, data_classes: usize) -> Result<()> {
    if model_classes != data_classes {
        return Err(QdError::Config(format!(
            "model has {model_classes} classes but the dataset has {data_classes}"
        )));
    }
    Ok(())
}

/// Float teacher used for distillation runs, shared read-only.
pub fn load_teacher(path: &Path) -> Result<Model> {
    io::load_float(path)
}
