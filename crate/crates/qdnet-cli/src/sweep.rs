//! Sequential hyperparameter sweep: width multiplier first, then softmax
//! temperature at the best width, then teacher weight at the best
//! temperature. Trials within a stage are independent and run on parallel
//! workers; results are merged by configuration key, so the report is
//! deterministic regardless of scheduling.

use std::path::Path;

use qdnet::data::Dataset;
use qdnet::distill::KDConfig;
use qdnet::io;
use qdnet::nn::{build_student, Model, TrainConfig};
use qdnet::train::{evaluate_float, train_float};
use qdnet::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::RunConfig;

pub const WIDTHS: [f32; 3] = [0.5, 1.0, 1.5];
pub const TEMPERATURES: [f64; 4] = [1.0, 3.0, 7.0, 9.0];
pub const BETAS: [f64; 5] = [0.5, 0.6, 0.8, 0.9, 1.0];
// starting point for the stages that have not been tuned yet
pub const INITIAL_TEMPERATURE: f64 = 5.0;
pub const INITIAL_BETA: f64 = 0.7;
// the no-KD reference model is the original (unscaled) student
pub const BASELINE_WIDTH: f32 = 1.0;

#[derive(Clone, Copy, Debug)]
pub struct SweepRow {
    pub stage: &'static str,
    pub width: f32,
    pub temperature: f64,
    pub beta: f64,
    pub val_mpca: f64,
    pub baseline_mpca: f64,
}

struct Trial {
    width: f32,
    kd: Option<KDConfig>,
    seed: u64,
}

fn run_trial(
    trial: &Trial,
    teacher: &Model,
    data: &Dataset,
    base: &TrainConfig,
    num_classes: usize,
    dropout_p: f32,
) -> Result<f64> {
    let mut cfg = base.clone();
    cfg.seed = trial.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(trial.seed);
    let mut student = build_student(num_classes, trial.width, dropout_p, &mut rng)?;
    let kd = trial.kd.clone().unwrap_or_else(KDConfig::hard_only);
    let kd_teacher = trial.kd.as_ref().map(|_| teacher);
    train_float(&mut student, kd_teacher, &kd, data, &cfg, |_| {})?;
    evaluate_float(&student, &data.val)
}

fn run_stage(
    trials: &[Trial],
    teacher: &Model,
    data: &Dataset,
    base: &TrainConfig,
    num_classes: usize,
    dropout_p: f32,
) -> Result<Vec<f64>> {
    trials
        .par_iter()
        .map(|t| run_trial(t, teacher, data, base, num_classes, dropout_p))
        .collect()
}

/// Index of the maximum score; ties go to the earlier (cheaper) entry.
fn best_index(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn run_sweep(cfg: &RunConfig, teacher_path: &Path) -> Result<Value> {
    let data = cfg.dataset()?;
    let teacher = io::load_float(teacher_path)?;
    let base = cfg.train_config();
    let num_classes = cfg.dataset.num_classes;
    let dropout_p = cfg.train.dropout_p;
    let stage =
        |trials: &[Trial]| run_stage(trials, &teacher, &data, &base, num_classes, dropout_p);

    // The reference point for every row is the original student — width
    // multiplier 1.0, trained without distillation. Every trial in the sweep,
    // baseline included, runs from the same training seed, so each comparison
    // is paired: identical init, identical batch order, only the loss differs.
    let baseline_trials = [Trial {
        width: BASELINE_WIDTH,
        kd: None,
        seed: cfg.seed,
    }];
    let baseline = stage(&baseline_trials)?[0];

    let mut rows: Vec<SweepRow> = Vec::with_capacity(12);

    // stage 1: width multiplier
    let width_trials: Vec<Trial> = WIDTHS
        .iter()
        .map(|&w| {
            Ok(Trial {
                width: w,
                kd: Some(with_literal(
                    KDConfig::new(INITIAL_BETA, INITIAL_TEMPERATURE)?,
                    cfg.kd.literal_eq1,
                )),
                seed: cfg.seed,
            })
        })
        .collect::<Result<_>>()?;
    let width_scores = stage(&width_trials)?;
    for (i, &w) in WIDTHS.iter().enumerate() {
        rows.push(SweepRow {
            stage: "width",
            width: w,
            temperature: INITIAL_TEMPERATURE,
            beta: INITIAL_BETA,
            val_mpca: width_scores[i],
            baseline_mpca: baseline,
        });
    }
    let best_width = WIDTHS[best_index(&width_scores)];

    // stage 2: temperature at the best width
    let temp_trials: Vec<Trial> = TEMPERATURES
        .iter()
        .map(|&t| {
            Ok(Trial {
                width: best_width,
                kd: Some(with_literal(
                    KDConfig::new(INITIAL_BETA, t)?,
                    cfg.kd.literal_eq1,
                )),
                seed: cfg.seed,
            })
        })
        .collect::<Result<_>>()?;
    let temp_scores = stage(&temp_trials)?;
    for (i, &t) in TEMPERATURES.iter().enumerate() {
        rows.push(SweepRow {
            stage: "temperature",
            width: best_width,
            temperature: t,
            beta: INITIAL_BETA,
            val_mpca: temp_scores[i],
            baseline_mpca: baseline,
        });
    }
    let best_temperature = TEMPERATURES[best_index(&temp_scores)];

    // stage 3: teacher weight at the best temperature
    let beta_trials: Vec<Trial> = BETAS
        .iter()
        .map(|&b| {
            Ok(Trial {
                width: best_width,
                kd: Some(with_literal(
                    KDConfig::new(b, best_temperature)?,
                    cfg.kd.literal_eq1,
                )),
                seed: cfg.seed,
            })
        })
        .collect::<Result<_>>()?;
    let beta_scores = stage(&beta_trials)?;
    for (i, &b) in BETAS.iter().enumerate() {
        rows.push(SweepRow {
            stage: "beta",
            width: best_width,
            temperature: best_temperature,
            beta: b,
            val_mpca: beta_scores[i],
            baseline_mpca: baseline,
        });
    }
    let best_beta = BETAS[best_index(&beta_scores)];

    eprintln!("{}", format_table(&rows));

    Ok(json!({
        "command": "sweep",
        "best_width": best_width,
        "best_temperature": best_temperature,
        "best_beta": best_beta,
        "baseline_width": BASELINE_WIDTH,
        "baseline_mpca": baseline,
        "rows": rows
            .iter()
            .map(|r| {
                json!({
                    "stage": r.stage,
                    "width": r.width,
                    "temperature": r.temperature,
                    "beta": r.beta,
                    "val_mpca": r.val_mpca,
                    "baseline_mpca": r.baseline_mpca,
                })
            })
            .collect::<Vec<_>>(),
    }))
}

fn with_literal(mut kd: KDConfig, literal_eq1: bool) -> KDConfig {
    kd.literal_eq1 = literal_eq1;
    kd
}

pub fn format_table(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    out.push_str("stage        width   T     beta  val_mpca  baseline\n");
    out.push_str("-----------  -----   ---   ----  --------  --------\n");
    for r in rows {
        out.push_str(&format!(
            "{:<11}  {:>5.2}   {:>3.0}   {:>4.2}  {:>8.4}  {:>8.4}\n",
            r.stage, r.width, r.temperature, r.beta, r.val_mpca, r.baseline_mpca
        ));
    }
    out
}
