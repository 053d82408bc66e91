//! Layer-graph model container and the teacher / width-scalable student
//! builders.

use super::layer::{BatchNormLayer, Conv2dLayer, DenseLayer, Layer, LayerCache, Mode};
use crate::error::{QdError, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelFamily {
    Teacher,
    Student,
}

impl ModelFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelFamily::Teacher => "teacher",
            ModelFamily::Student => "student",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub family: ModelFamily,
    pub width_multiplier: f32,
    pub num_classes: usize,
}

impl Model {
    pub fn forward_train(
        &mut self,
        batch: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Vec<LayerCache>)> {
        let mut x = batch.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter_mut().enumerate() {
            let kind = layer.kind();
            let (out, cache) = layer.forward(&x, Mode::Train, rng).map_err(|e| {
                QdError::Layer {
                    index,
                    kind: kind.into(),
                    message: e.to_string(),
                }
            })?;
            caches.push(cache);
            x = out;
        }
        Ok((x, caches))
    }

    pub fn forward_eval(&self, batch: &Tensor) -> Result<Tensor> {
        let mut x = batch.clone();
        for (index, layer) in self.layers.iter().enumerate() {
            x = layer.forward_eval(&x).map_err(|e| QdError::Layer {
                index,
                kind: layer.kind().into(),
                message: e.to_string(),
            })?;
        }
        Ok(x)
    }

    /// Gradients of the scalar loss w.r.t. every parameter, aligned with
    /// `params()`. `loss_grad` is dL/d(logits).
    pub fn backward(&self, caches: &[LayerCache], loss_grad: &Tensor) -> Result<Vec<Tensor>> {
        let mut grad = loss_grad.clone();
        let mut per_layer: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let (gi, gp) = layer.backward(cache, &grad)?;
            per_layer.push(gp);
            grad = gi;
        }
        per_layer.reverse();
        Ok(per_layer.into_iter().flatten().collect())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&c.weight);
                    out.push(&c.bias);
                }
                Layer::BatchNorm(b) => {
                    out.push(&b.gamma);
                    out.push(&b.beta);
                }
                Layer::Dense(d) => {
                    out.push(&d.weight);
                    out.push(&d.bias);
                }
                Layer::FusedConv(f) => {
                    out.push(&f.conv.weight);
                    out.push(&f.conv.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                Layer::BatchNorm(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
                Layer::Dense(d) => {
                    out.push(&mut d.weight);
                    out.push(&mut d.bias);
                }
                Layer::FusedConv(f) => {
                    out.push(&mut f.conv.weight);
                    out.push(&mut f.conv.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Freeze every BatchNorm: normalize with running stats from now on.
    pub fn freeze_batchnorm(&mut self) {
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                bn.frozen = true;
            }
        }
    }
}

fn kaiming_conv(
    rng: &mut ChaCha8Rng,
    out_c: usize,
    in_c: usize,
    kh: usize,
    kw: usize,
) -> Tensor {
    let fan_in = (in_c * kh * kw) as f32;
    let std = (2.0 / fan_in).sqrt();
    Tensor::from_fn(vec![out_c, in_c, kh, kw], |_| sample_normal(rng) * std)
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller; two uniforms per sample, second draw discarded
    let u1: f32 = rng.gen_range(1e-7f32..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

fn conv_bn_relu(
    rng: &mut ChaCha8Rng,
    layers: &mut Vec<Layer>,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    padding: usize,
    depthwise: bool,
) {
    let weight = if depthwise {
        kaiming_conv(rng, out_c, 1, k, k)
    } else {
        kaiming_conv(rng, out_c, in_c, k, k)
    };
    layers.push(Layer::Conv(Conv2dLayer {
        weight,
        bias: Tensor::zeros(vec![out_c]),
        stride,
        padding,
        depthwise,
    }));
    layers.push(Layer::BatchNorm(BatchNormLayer::new(out_c)));
    layers.push(Layer::Relu);
}

/// Plain Conv-BN-ReLU stack; the high-capacity logit source.
pub fn build_teacher(num_classes: usize, dropout_p: f32, rng: &mut ChaCha8Rng) -> Result<Model> {
    if num_classes < 2 {
        return Err(QdError::Config(format!(
            "num_classes must be >= 2, got {num_classes}"
        )));
    }
    let mut layers = Vec::new();
    // stride-2 stages use 2x2 kernels with no padding so even spatial sizes
    // divide exactly (output size must be integral)
    conv_bn_relu(rng, &mut layers, 1, 16, 3, 1, 1, false);
    conv_bn_relu(rng, &mut layers, 16, 32, 2, 2, 0, false);
    conv_bn_relu(rng, &mut layers, 32, 32, 3, 1, 1, false);
    conv_bn_relu(rng, &mut layers, 32, 64, 2, 2, 0, false);
    conv_bn_relu(rng, &mut layers, 64, 64, 3, 1, 1, false);
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Dropout { p: dropout_p });
    layers.push(Layer::Dense(DenseLayer {
        weight: Tensor::from_fn(vec![num_classes, 64], |_| sample_normal(rng) * (1.0 / 8.0)),
        bias: Tensor::zeros(vec![num_classes]),
    }));
    Ok(Model {
        layers,
        family: ModelFamily::Teacher,
        width_multiplier: 1.0,
        num_classes,
    })
}

fn scaled_channels(base: usize, width_multiplier: f32) -> usize {
    let c = (base as f32 * width_multiplier).round() as usize;
    if c == 0 {
        eprintln!(
            "warning: width multiplier {width_multiplier} collapses {base} channels to 0; clamping to 1"
        );
        1
    } else {
        c
    }
}

/// Stem conv followed by depthwise-separable blocks (depthwise 3x3 +
/// pointwise 1x1, each Conv-BN-ReLU), global average pooling and a classifier
/// head. `width_multiplier` scales every channel count.
pub fn build_student(
    num_classes: usize,
    width_multiplier: f32,
    dropout_p: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Model> {
    if num_classes < 2 {
        return Err(QdError::Config(format!(
            "num_classes must be >= 2, got {num_classes}"
        )));
    }
    if width_multiplier <= 0.0 {
        return Err(QdError::Config(format!(
            "width_multiplier must be positive, got {width_multiplier}"
        )));
    }
    let stem = scaled_channels(16, width_multiplier);
    let blocks = [
        (scaled_channels(32, width_multiplier), 2usize),
        (scaled_channels(48, width_multiplier), 2),
        (scaled_channels(64, width_multiplier), 1),
    ];
    let mut layers = Vec::new();
    conv_bn_relu(rng, &mut layers, 1, stem, 3, 1, 1, false);
    let mut in_c = stem;
    for &(out_c, stride) in &blocks {
        // depthwise at stride 2 uses a 2x2 kernel, no padding, so even
        // spatial sizes divide exactly
        let (k, padding) = if stride == 2 { (2, 0) } else { (3, 1) };
        conv_bn_relu(rng, &mut layers, in_c, in_c, k, stride, padding, true);
        conv_bn_relu(rng, &mut layers, in_c, out_c, 1, 1, 0, false);
        in_c = out_c;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Dropout { p: dropout_p });
    layers.push(Layer::Dense(DenseLayer {
        weight: Tensor::from_fn(vec![num_classes, in_c], |_| {
            sample_normal(rng) * (1.0 / (in_c as f32).sqrt())
        }),
        bias: Tensor::zeros(vec![num_classes]),
    }));
    Ok(Model {
        layers,
        family: ModelFamily::Student,
        width_multiplier,
        num_classes,
    })
}
