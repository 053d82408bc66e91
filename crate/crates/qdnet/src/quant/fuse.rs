//! Batchnorm folding and Conv-BN(-ReLU) fusion.

use crate::error::{QdError, Result};
use crate::nn::{BatchNormLayer, FusedConvLayer, Layer, Model};
use crate::tensor::Tensor;

/// Fold eval-mode batchnorm into the preceding convolution:
/// w'[o,..] = w[o,..] * gamma[o]/sqrt(var[o]+eps)
/// b'[o] = beta[o] + (b[o] - mean[o]) * gamma[o]/sqrt(var[o]+eps)
pub fn fold_batchnorm(
    conv_w: &Tensor,
    conv_b: &Tensor,
    bn: &BatchNormLayer,
) -> Result<(Tensor, Tensor)> {
    let co = conv_w.shape()[0];
    if bn.gamma.numel() != co || conv_b.numel() != co {
        return Err(QdError::ShapeMismatch {
            context: "fold_batchnorm channels".into(),
            lhs: conv_w.shape().to_vec(),
            rhs: vec![bn.gamma.numel()],
        });
    }
    if bn.running_var.data().iter().any(|&v| v < 0.0) {
        return Err(QdError::Numeric(
            "negative running variance in fold_batchnorm".into(),
        ));
    }
    let per_out = conv_w.numel() / co;
    let factors: Vec<f64> = (0..co)
        .map(|o| {
            bn.gamma.data()[o] as f64 / (bn.running_var.data()[o] as f64 + bn.epsilon as f64).sqrt()
        })
        .collect();
    let w = Tensor::from_fn(conv_w.shape().to_vec(), |i| {
        (conv_w.data()[i] as f64 * factors[i / per_out]) as f32
    });
    let b = Tensor::from_fn(vec![co], |o| {
        (bn.beta.data()[o] as f64
            + (conv_b.data()[o] as f64 - bn.running_mean.data()[o] as f64) * factors[o])
            as f32
    });
    Ok((w, b))
}

/// Replace each Conv-BN-ReLU / Conv-BN run by a single FusedConv carrying a
/// relu flag. The model must be in its final eval state (running stats
/// frozen); the fused model's eval output matches the original.
pub fn fuse_layers(model: &Model) -> Result<Model> {
    let mut layers = Vec::new();
    let src = &model.layers;
    let mut i = 0;
    while i < src.len() {
        match (&src[i], src.get(i + 1)) {
            (Layer::Conv(conv), Some(Layer::BatchNorm(bn))) => {
                let (weight, bias) = fold_batchnorm(&conv.weight, &conv.bias, bn)?;
                let relu = matches!(src.get(i + 2), Some(Layer::Relu));
                let mut fused_conv = conv.clone();
                fused_conv.weight = weight;
                fused_conv.bias = bias;
                layers.push(Layer::FusedConv(FusedConvLayer {
                    conv: fused_conv,
                    relu,
                }));
                i += if relu { 3 } else { 2 };
            }
            (Layer::BatchNorm(_), _) => {
                return Err(QdError::Structure(format!(
                    "layer {i}: BatchNorm not preceded by Conv; cannot fuse"
                )));
            }
            (layer, _) => {
                layers.push(layer.clone());
                i += 1;
            }
        }
    }
    Ok(Model {
        layers,
        family: model.family,
        width_multiplier: model.width_multiplier,
        num_classes: model.num_classes,
    })
}
