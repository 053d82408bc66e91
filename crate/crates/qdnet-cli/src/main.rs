use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use qdnet::{QdError, Result};
use qdnet_cli::config::{load_config, parse_overrides, RunConfig};
use qdnet_cli::{bench, commands, error_class, sweep};
use serde_json::Value;

#[derive(Parser)]
#[command(
    name = "qdnet",
    version,
    about = "Quantized knowledge distillation: train, distill, quantize, evaluate, benchmark"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Options shared by every subcommand that trains or evaluates.
#[derive(Args)]
struct Common {
    /// TOML config file; any key can also be set as `--section.key value`
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the JSON report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trailing `--section.key value` config overrides
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the float teacher network
    TrainTeacher {
        /// Output model path
        #[arg(long, default_value = "teacher.qdk")]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a float student, optionally distilling from a teacher
    TrainStudent {
        /// Teacher model path; enables knowledge distillation
        #[arg(long)]
        kd: Option<PathBuf>,
        #[arg(long, default_value = "student.qdk")]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Quantization-aware distillation: train a student against a teacher
    /// with simulated 8-bit quantization, then convert to integer-only form
    QatDistill {
        /// Trained float teacher
        #[arg(long)]
        teacher: PathBuf,
        /// Optional float student to continue from instead of a fresh init
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long, default_value = "student_q.qdk")]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Post-training quantization of a float student (calibration only)
    Quantize {
        /// Trained float student
        #[arg(long)]
        student: PathBuf,
        #[arg(long, default_value = "student_ptq.qdk")]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a model: per-class accuracy, mean per-class accuracy,
    /// confusion counts
    Eval {
        /// Model path (float or quantized)
        model: PathBuf,
        /// Dataset split: train, val, or test
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Single-sample latency benchmark on one thread
    Bench {
        /// Model path (float or quantized)
        model: PathBuf,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        /// Write the JSON report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sequential hyperparameter sweep: width, then temperature, then beta
    Sweep {
        /// Trained float teacher
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let overrides = parse_overrides(&common.overrides)?;
    load_config(common.config.as_deref(), &overrides)
}

fn emit(report: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| QdError::Config(format!("report serialization: {e}")))?;
    match out {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TrainTeacher { model, common } => {
            let cfg = resolve_config(&common)?;
            emit(&commands::cmd_train_teacher(&cfg, &model)?, common.out.as_deref())
        }
        Cmd::TrainStudent { kd, model, common } => {
            let cfg = resolve_config(&common)?;
            emit(
                &commands::cmd_train_student(&cfg, kd.as_deref(), &model)?,
                common.out.as_deref(),
            )
        }
        Cmd::QatDistill {
            teacher,
            student,
            model,
            common,
        } => {
            let cfg = resolve_config(&common)?;
            emit(
                &commands::cmd_qat_distill(&cfg, &teacher, student.as_deref(), &model)?,
                common.out.as_deref(),
            )
        }
        Cmd::Quantize {
            student,
            model,
            common,
        } => {
            let cfg = resolve_config(&common)?;
            emit(
                &commands::cmd_quantize(&cfg, &student, &model)?,
                common.out.as_deref(),
            )
        }
        Cmd::Eval {
            model,
            split,
            common,
        } => {
            let cfg = resolve_config(&common)?;
            emit(&commands::cmd_eval(&model, &split, &cfg)?, common.out.as_deref())
        }
        Cmd::Bench {
            model,
            iterations,
            out,
        } => emit(&bench::run_bench(&model, iterations)?, out.as_deref()),
        Cmd::Sweep { teacher, common } => {
            let cfg = resolve_config(&common)?;
            emit(&sweep::run_sweep(&cfg, &teacher)?, common.out.as_deref())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error[{}]: {e}", error_class(&e));
        std::process::exit(1);
    }
}
