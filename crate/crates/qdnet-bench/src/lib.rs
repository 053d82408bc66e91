//! Shared fixtures for the criterion benchmarks: deterministic random
//! tensors, a float student, and its calibrated integer conversion.

use qdnet::nn::{build_student, Model};
use qdnet::quant::{calibrate, compute_qparams, convert_to_int8, fuse_layers, QatModel};
use qdnet::{int8::QuantizedModel, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(0.0f32..1.0))
}

pub fn float_student(width: f32) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    build_student(8, width, 0.0, &mut rng)
}

/// Fused and converted copy of [`float_student`], calibrated on one random
/// batch so every observer has a range.
pub fn quantized_student(width: f32) -> Result<QuantizedModel> {
    let model = float_student(width)?;
    let fused = fuse_layers(&model)?;
    let mut qat = QatModel::from_fused(&fused)?;
    calibrate(&mut qat, &[rand_tensor(vec![8, 1, 32, 32], 7)])?;
    convert_to_int8(&qat)
}

/// Quantization parameters covering a [lo, hi] float range.
pub fn qp_for(lo: f32, hi: f32) -> qdnet::quant::QuantParams {
    compute_qparams(lo, hi).expect("valid range")
}
