//! Library surface of the `qdnet` binary: configuration loading, subcommand
//! implementations, the latency benchmark, and the hyperparameter sweep.

pub mod bench;
pub mod commands;
pub mod config;
pub mod sweep;

use qdnet::QdError;

/// Stable one-word class for machine-parsable error lines
/// (`error[class]: message`).
pub fn error_class(err: &QdError) -> &'static str {
    match err {
        QdError::ShapeMismatch { .. } => "shape",
        QdError::InvalidShape(_) => "shape",
        QdError::Layer { .. } => "layer",
        QdError::Structure(_) => "structure",
        QdError::Numeric(_) => "numeric",
        QdError::Quant(_) => "quant",
        QdError::MultiplierOutOfRange { .. } => "quant",
        QdError::Unobserved { .. } => "quant",
        QdError::Config(_) => "config",
        QdError::Parse { .. } => "parse",
        QdError::Io(_) => "io",
    }
}
