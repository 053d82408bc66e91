//! Integer-only forward pass: quantized matmul/convolution with i32
//! accumulators, fixed-point requantization, and fused ReLU as clamping at
//! the output zero-point.
//!
//! Between input quantization and final dequantization no floating-point
//! operation executes; every intermediate value lives in u8/i32/i64.

use crate::error::{QdError, Result};
use crate::quant::{dequantize, quantize, requantize, QuantParams, RequantMultiplier};
use crate::tensor::{conv_out_dim, Tensor};
use rayon::prelude::*;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
    pub qp: QuantParams,
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u8>, qp: QuantParams) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(QdError::InvalidShape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data, qp })
    }

    pub fn from_float(t: &Tensor, qp: QuantParams) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&r| quantize(r, qp)).collect(),
            qp,
        }
    }

    pub fn dequantize(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&q| dequantize(q, self.qp)).collect(),
        )
        .expect("shape/data consistent by construction")
    }
}

/// One quantized layer: u8 weights, i32 biases at scale S_in*S_w (zero-point
/// 0), and the requant multiplier derived from (S_in, S_w, S_out).
#[derive(Clone, Debug, PartialEq)]
pub enum QLayer {
    Conv {
        weight: Vec<u8>,
        weight_shape: Vec<usize>,
        bias: Vec<i32>,
        in_qp: QuantParams,
        weight_qp: QuantParams,
        out_qp: QuantParams,
        rm: RequantMultiplier,
        stride: usize,
        padding: usize,
        depthwise: bool,
        relu: bool,
    },
    Dense {
        weight: Vec<u8>,
        weight_shape: Vec<usize>, // [out,in]
        bias: Vec<i32>,
        in_qp: QuantParams,
        weight_qp: QuantParams,
        out_qp: QuantParams,
        rm: RequantMultiplier,
    },
    /// Integer mean over spatial positions; quantization parameters pass
    /// through unchanged.
    GlobalAvgPool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub input_qp: QuantParams,
    pub layers: Vec<QLayer>,
    pub num_classes: usize,
    pub width_multiplier: f32,
}

impl QuantizedModel {
    /// Check the layer-chain invariant: each layer's input parameters equal
    /// the previous layer's output parameters.
    pub fn validate(&self) -> Result<()> {
        let mut qp = self.input_qp;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                QLayer::Conv { in_qp, out_qp, .. } | QLayer::Dense { in_qp, out_qp, .. } => {
                    if *in_qp != qp {
                        return Err(QdError::Structure(format!(
                            "layer {i}: input QuantParams {:?} do not match the chain {:?}",
                            in_qp, qp
                        )));
                    }
                    qp = *out_qp;
                }
                QLayer::GlobalAvgPool => {}
            }
        }
        Ok(())
    }
}

/// Eq-(4)-style quantized matrix multiplication:
/// q3[i,k] = Z3 + requant(sum_j (q1[i,j]-Z1)(q2[j,k]-Z2)).
pub fn qmatmul(
    q1: &QuantizedTensor,
    q2: &QuantizedTensor,
    out_qp: QuantParams,
    rm: RequantMultiplier,
) -> Result<QuantizedTensor> {
    if q1.shape.len() != 2 || q2.shape.len() != 2 || q1.shape[1] != q2.shape[0] {
        return Err(QdError::ShapeMismatch {
            context: "qmatmul".into(),
            lhs: q1.shape.clone(),
            rhs: q2.shape.clone(),
        });
    }
    let (m, k, n) = (q1.shape[0], q1.shape[1], q2.shape[1]);
    let z1 = q1.qp.zero_point as i32;
    let z2 = q2.qp.zero_point as i32;
    let mut out = vec![0u8; m * n];
    for i in 0..m {
        for kk in 0..n {
            let mut acc = 0i32;
            for j in 0..k {
                let a = q1.data[i * k + j] as i32 - z1;
                let b = q2.data[j * n + kk] as i32 - z2;
                acc += a * b;
            }
            out[i * n + kk] = requantize(acc, rm, out_qp.zero_point);
        }
    }
    QuantizedTensor::new(vec![m, n], out, out_qp)
}

#[allow(clippy::too_many_arguments)]
fn qconv_impl(
    input: &QuantizedTensor,
    weight: &[u8],
    weight_shape: &[usize],
    bias: &[i32],
    weight_qp: QuantParams,
    out_qp: QuantParams,
    rm: RequantMultiplier,
    stride: usize,
    padding: usize,
    depthwise: bool,
    relu: bool,
) -> Result<QuantizedTensor> {
    let (n, ci, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    let (co, wci, kh, kw) = (
        weight_shape[0],
        weight_shape[1],
        weight_shape[2],
        weight_shape[3],
    );
    let expected_wci = if depthwise { 1 } else { ci };
    if wci != expected_wci || (depthwise && co != ci) {
        return Err(QdError::ShapeMismatch {
            context: "qconv weight vs input channels".into(),
            lhs: input.shape.clone(),
            rhs: weight_shape.to_vec(),
        });
    }
    let oh = conv_out_dim(h, kh, stride, padding)?;
    let ow = conv_out_dim(w, kw, stride, padding)?;
    let z_in = input.qp.zero_point as i32;
    let z_w = weight_qp.zero_point as i32;
    let z_out = out_qp.zero_point;
    // valid output index range for i = y*stride + k - padding in [0, limit);
    // positions outside it read zero padding, which contributes
    // (z_in - z_in) * w = 0 to the accumulator and can be skipped
    let tap_range = |k: usize, limit: usize, out_limit: usize| -> (usize, usize) {
        let start = (padding as isize - k as isize).max(0) as usize;
        let lo = start.div_ceil(stride);
        let top = limit as isize - 1 - k as isize + padding as isize;
        let hi = if top < 0 { 0 } else { top as usize / stride + 1 };
        (lo, hi.min(out_limit))
    };
    let mut out = vec![0u8; n * co * oh * ow];
    out.par_chunks_mut(co * oh * ow)
        .enumerate()
        .for_each(|(ni, sample)| {
            let mut acc = vec![0i32; oh * ow];
            for o in 0..co {
                acc.fill(bias[o]);
                let (c_lo, c_hi) = if depthwise { (o, o + 1) } else { (0, ci) };
                for c in c_lo..c_hi {
                    let wc = if depthwise { 0 } else { c };
                    let in_plane = &input.data[(ni * ci + c) * h * w..(ni * ci + c + 1) * h * w];
                    for ky in 0..kh {
                        let (y_lo, y_hi) = tap_range(ky, h, oh);
                        for kx in 0..kw {
                            let qw = weight[((o * wci + wc) * kh + ky) * kw + kx] as i32 - z_w;
                            if qw == 0 {
                                continue;
                            }
                            let (x_lo, x_hi) = tap_range(kx, w, ow);
                            if y_lo >= y_hi || x_lo >= x_hi {
                                continue;
                            }
                            for y in y_lo..y_hi {
                                let iy = y * stride + ky - padding;
                                let acc_row = &mut acc[y * ow + x_lo..y * ow + x_hi];
                                if stride == 1 {
                                    let ix0 = x_lo + kx - padding;
                                    let in_row =
                                        &in_plane[iy * w + ix0..iy * w + ix0 + x_hi - x_lo];
                                    for (a, &qi) in acc_row.iter_mut().zip(in_row) {
                                        *a += qw * (qi as i32 - z_in);
                                    }
                                } else {
                                    for (a, x) in acc_row.iter_mut().zip(x_lo..x_hi) {
                                        let ix = x * stride + kx - padding;
                                        *a += qw * (in_plane[iy * w + ix] as i32 - z_in);
                                    }
                                }
                            }
                        }
                    }
                }
                for (o_el, &a) in sample[o * oh * ow..(o + 1) * oh * ow].iter_mut().zip(&acc) {
                    let mut q = requantize(a, rm, z_out);
                    if relu {
                        q = q.max(z_out);
                    }
                    *o_el = q;
                }
            }
        });
    QuantizedTensor::new(vec![n, co, oh, ow], out, out_qp)
}

pub fn qconv2d(input: &QuantizedTensor, layer: &QLayer) -> Result<QuantizedTensor> {
    match layer {
        QLayer::Conv {
            weight,
            weight_shape,
            bias,
            weight_qp,
            out_qp,
            rm,
            stride,
            padding,
            depthwise,
            relu,
            ..
        } => qconv_impl(
            input,
            weight,
            weight_shape,
            bias,
            *weight_qp,
            *out_qp,
            *rm,
            *stride,
            *padding,
            *depthwise,
            *relu,
        ),
        _ => Err(QdError::Structure("qconv2d expects a Conv layer".into())),
    }
}

fn qdense(
    input: &QuantizedTensor,
    weight: &[u8],
    weight_shape: &[usize],
    bias: &[i32],
    weight_qp: QuantParams,
    out_qp: QuantParams,
    rm: RequantMultiplier,
) -> Result<QuantizedTensor> {
    let (n, d_in) = (input.shape[0], input.shape[1]);
    let (d_out, wd_in) = (weight_shape[0], weight_shape[1]);
    if input.shape.len() != 2 || wd_in != d_in {
        return Err(QdError::ShapeMismatch {
            context: "qdense".into(),
            lhs: input.shape.clone(),
            rhs: weight_shape.to_vec(),
        });
    }
    let z_in = input.qp.zero_point as i32;
    let z_w = weight_qp.zero_point as i32;
    let mut out = vec![0u8; n * d_out];
    for ni in 0..n {
        for o in 0..d_out {
            let mut acc = bias[o];
            for i in 0..d_in {
                acc += (input.data[ni * d_in + i] as i32 - z_in)
                    * (weight[o * d_in + i] as i32 - z_w);
            }
            out[ni * d_out + o] = requantize(acc, rm, out_qp.zero_point);
        }
    }
    QuantizedTensor::new(vec![n, d_out], out, out_qp)
}

/// Integer global average pool; rounding is half-away-from-zero on the
/// zero-point-shifted sum.
fn qglobal_avg_pool(input: &QuantizedTensor) -> Result<QuantizedTensor> {
    if input.shape.len() != 4 {
        return Err(QdError::InvalidShape(format!(
            "qglobal_avg_pool expects NCHW, got {:?}",
            input.shape
        )));
    }
    let (n, c, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    let count = (h * w) as i64;
    let z = input.qp.zero_point as i64;
    let mut out = vec![0u8; n * c];
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * h * w;
            let mut sum = 0i64;
            for i in 0..h * w {
                sum += input.data[base + i] as i64 - z;
            }
            let mag = (2 * sum.abs() + count) / (2 * count);
            let rounded = if sum >= 0 { mag } else { -mag };
            out[ni * c + ch] = (z + rounded).clamp(0, 255) as u8;
        }
    }
    QuantizedTensor::new(vec![n, c], out, input.qp)
}

/// Quantize a float batch at the model's input parameters, run every layer in
/// integer arithmetic, and dequantize the final logits.
pub fn quantized_forward(model: &QuantizedModel, input: &Tensor) -> Result<Tensor> {
    model.validate()?;
    let mut q = QuantizedTensor::from_float(input, model.input_qp);
    for (index, layer) in model.layers.iter().enumerate() {
        q = match layer {
            QLayer::Conv { .. } => qconv2d(&q, layer),
            QLayer::Dense {
                weight,
                weight_shape,
                bias,
                weight_qp,
                out_qp,
                rm,
                ..
            } => qdense(&q, weight, weight_shape, bias, *weight_qp, *out_qp, *rm),
            QLayer::GlobalAvgPool => qglobal_avg_pool(&q),
        }
        .map_err(|e| QdError::Layer {
            index,
            kind: "quantized".into(),
            message: e.to_string(),
        })?;
    }
    Ok(q.dequantize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{compute_qparams, derive_requant_multiplier};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn qmatmul_zero_points_are_absorbing() {
        let qp1 = QuantParams::new(0.01, 128);
        let qp2 = QuantParams::new(0.02, 100);
        let out_qp = QuantParams::new(0.05, 77);
        let rm = derive_requant_multiplier(qp1.scale, qp2.scale, out_qp.scale).unwrap();
        let a = QuantizedTensor::new(vec![3, 4], vec![128; 12], qp1).unwrap();
        let b = QuantizedTensor::new(vec![4, 2], vec![100; 8], qp2).unwrap();
        let c = qmatmul(&a, &b, out_qp, rm).unwrap();
        assert!(c.data.iter().all(|&q| q == 77));
    }

    #[test]
    fn qmatmul_one_by_one_unit_product() {
        // (130-128)*(200-100) = 200, M = 0.01*0.01/0.02 = 0.005, 200*0.005 = 1
        let qp1 = QuantParams::new(0.01, 128);
        let qp2 = QuantParams::new(0.01, 100);
        let out_qp = QuantParams::new(0.02, 7);
        let rm = derive_requant_multiplier(0.01, 0.01, 0.02).unwrap();
        let a = QuantizedTensor::new(vec![1, 1], vec![130], qp1).unwrap();
        let b = QuantizedTensor::new(vec![1, 1], vec![200], qp2).unwrap();
        let c = qmatmul(&a, &b, out_qp, rm).unwrap();
        assert_eq!(c.data, vec![8]);
    }

    #[test]
    fn qmatmul_shape_mismatch() {
        let qp = QuantParams::new(0.01, 0);
        let a = QuantizedTensor::new(vec![2, 3], vec![0; 6], qp).unwrap();
        let b = QuantizedTensor::new(vec![2, 2], vec![0; 4], qp).unwrap();
        let rm = derive_requant_multiplier(0.01, 0.01, 0.02).unwrap();
        assert!(qmatmul(&a, &b, qp, rm).is_err());
    }

    #[test]
    fn qmatmul_tracks_float_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let qp1 = compute_qparams(-1.0, 1.0).unwrap();
        let qp2 = compute_qparams(-1.0, 1.0).unwrap();
        let a = QuantizedTensor::new(vec![8, 8], (0..64).map(|_| rng.gen()).collect(), qp1).unwrap();
        let b = QuantizedTensor::new(vec![8, 8], (0..64).map(|_| rng.gen()).collect(), qp2).unwrap();
        // float reference on dequantized inputs
        let fa = a.dequantize();
        let fb = b.dequantize();
        let reference = crate::tensor::matmul(&fa, &fb).unwrap();
        let out_qp = compute_qparams(reference.min(), reference.max()).unwrap();
        let rm = derive_requant_multiplier(qp1.scale, qp2.scale, out_qp.scale).unwrap();
        let c = qmatmul(&a, &b, out_qp, rm).unwrap();
        let cd = c.dequantize();
        for (x, y) in cd.data().iter().zip(reference.data()) {
            assert!(
                (x - y).abs() as f64 <= out_qp.scale,
                "{x} vs {y} (S3 = {})",
                out_qp.scale
            );
        }
    }

    fn identity_conv_layer(io_qp: QuantParams) -> QLayer {
        // w = 1.0 exactly at S_w = 0.5, Z_w = 0 (q_w = 2); M = 0.5 * S_in/S_out = 0.5
        let weight_qp = QuantParams::new(0.5, 0);
        let rm = derive_requant_multiplier(io_qp.scale, weight_qp.scale, io_qp.scale).unwrap();
        QLayer::Conv {
            weight: vec![2],
            weight_shape: vec![1, 1, 1, 1],
            bias: vec![0],
            in_qp: io_qp,
            weight_qp,
            out_qp: io_qp,
            rm,
            stride: 1,
            padding: 0,
            depthwise: false,
            relu: false,
        }
    }

    #[test]
    fn qconv_identity_weight_passthrough() {
        let qp = QuantParams::new(0.02, 128);
        let layer = identity_conv_layer(qp);
        let input =
            QuantizedTensor::new(vec![1, 1, 3, 3], (0u8..9).map(|i| i * 25).collect(), qp).unwrap();
        let out = qconv2d(&input, &layer).unwrap();
        assert_eq!(out.data, input.data);
    }

    #[test]
    fn qconv_fused_relu_clamps_at_zero_point() {
        let qp = QuantParams::new(0.02, 128);
        let mut layer = identity_conv_layer(qp);
        if let QLayer::Conv { relu, .. } = &mut layer {
            *relu = true;
        }
        // inputs below the zero-point are negative reals; relu maps them to 0 = Z
        let input =
            QuantizedTensor::new(vec![1, 1, 2, 2], vec![10, 127, 128, 200], qp).unwrap();
        let out = qconv2d(&input, &layer).unwrap();
        assert_eq!(out.data, vec![128, 128, 128, 200]);
    }

    #[test]
    fn qconv_tracks_float_fused_conv_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let in_qp = compute_qparams(-1.0, 1.0).unwrap();
        let w_float = Tensor::from_fn(vec![3, 2, 3, 3], |_| rng.gen_range(-0.8..0.8f32));
        let w_qp = compute_qparams(w_float.min(), w_float.max()).unwrap();
        let wq: Vec<u8> = w_float.data().iter().map(|&r| crate::quant::quantize(r, w_qp)).collect();
        let input_q = QuantizedTensor::new(
            vec![2, 2, 6, 6],
            (0..144).map(|_| rng.gen()).collect(),
            in_qp,
        )
        .unwrap();
        let bias_scale = in_qp.scale * w_qp.scale;
        let bias_real: Vec<f32> = (0..3).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let bias_i32: Vec<i32> = bias_real
            .iter()
            .map(|&b| (b as f64 / bias_scale).round() as i32)
            .collect();
        // float reference with the dequantized weights/bias
        let w_deq = Tensor::new(
            vec![3, 2, 3, 3],
            wq.iter().map(|&q| crate::quant::dequantize(q, w_qp)).collect(),
        )
        .unwrap();
        let b_deq = Tensor::new(
            vec![3],
            bias_i32.iter().map(|&b| (b as f64 * bias_scale) as f32).collect(),
        )
        .unwrap();
        let reference =
            crate::tensor::conv2d(&input_q.dequantize(), &w_deq, &b_deq, 1, 1).unwrap();
        let out_qp = compute_qparams(reference.min(), reference.max()).unwrap();
        let rm = derive_requant_multiplier(in_qp.scale, w_qp.scale, out_qp.scale).unwrap();
        let layer = QLayer::Conv {
            weight: wq,
            weight_shape: vec![3, 2, 3, 3],
            bias: bias_i32,
            in_qp,
            weight_qp: w_qp,
            out_qp,
            rm,
            stride: 1,
            padding: 1,
            depthwise: false,
            relu: false,
        };
        let out = qconv2d(&input_q, &layer).unwrap();
        let out_deq = out.dequantize();
        let mut close = 0usize;
        for (x, y) in out_deq.data().iter().zip(reference.data()) {
            let err = (x - y).abs() as f64;
            assert!(err <= out_qp.scale, "{x} vs {y}");
            if err <= out_qp.scale / 2.0 + 1e-9 {
                close += 1;
            }
        }
        // 99th percentile within S/2
        assert!(close * 100 >= out_deq.numel() * 99);
    }
}
