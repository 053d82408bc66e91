//! Quantized knowledge distillation toolkit: train a large teacher, distill
//! it into a small depthwise-separable student while simulating 8-bit
//! quantization, convert the student to an integer-only engine, and measure
//! accuracy, size, and latency.

pub mod data;
pub mod distill;
pub mod error;
pub mod int8;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{QdError, Result};
pub use tensor::Tensor;
