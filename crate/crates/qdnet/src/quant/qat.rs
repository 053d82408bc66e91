//! Quantization-aware training on a fused model: per-layer observers, fake
//! quantization of weights and activations, clipped-STE backward, and
//! conversion to the integer model.

use super::{
    compute_qparams, derive_requant_multiplier, fake_quantize_with_mask, quantize, ObserverState,
    QuantParams,
};
use crate::error::{QdError, Result};
use crate::int8::{QLayer, QuantizedModel};
use crate::nn::{conv_backward, dense_backward, dense_forward, Conv2dLayer, DenseLayer, Layer, Model};
use crate::tensor::{global_avg_pool, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub enum QatLayer {
    FusedConv {
        conv: Conv2dLayer,
        relu: bool,
        observer: ObserverState,
    },
    Dense {
        dense: DenseLayer,
        observer: ObserverState,
    },
    GlobalAvgPool,
    Dropout {
        p: f32,
    },
}

#[derive(Clone, Debug)]
pub enum QatCache {
    FusedConv {
        input: Tensor,
        w_fq: Tensor,
        w_mask: Vec<bool>,
        relu_mask: Option<Vec<bool>>,
        act_mask: Vec<bool>,
    },
    Dense {
        input: Tensor,
        w_fq: Tensor,
        w_mask: Vec<bool>,
        act_mask: Vec<bool>,
    },
    Gap {
        in_shape: Vec<usize>,
        act_mask: Vec<bool>,
    },
    Dropout {
        mask: Option<Vec<f32>>,
    },
}

/// A fused student wrapped for QAT simulation: float master weights plus
/// min/max observers at the input and after every parameterized layer.
#[derive(Clone, Debug)]
pub struct QatModel {
    pub input_observer: ObserverState,
    pub layers: Vec<QatLayer>,
    pub num_classes: usize,
    pub width_multiplier: f32,
}

fn weight_qparams(w: &Tensor) -> Result<QuantParams> {
    // all-zero weights: any scale represents the tensor exactly, and the
    // default unit scale would push M = S_in*S_w/S_out past 1
    if w.min() == 0.0 && w.max() == 0.0 {
        return Ok(QuantParams::new(1.0 / 65536.0, 0));
    }
    compute_qparams(w.min(), w.max())
}

impl QatModel {
    /// Attach observers and fake quantization to a fused model (Alg. 1 step 3).
    pub fn from_fused(model: &Model) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, layer) in model.layers.iter().enumerate() {
            match layer {
                Layer::FusedConv(f) => layers.push(QatLayer::FusedConv {
                    conv: f.conv.clone(),
                    relu: f.relu,
                    observer: ObserverState::new(),
                }),
                Layer::Dense(d) => layers.push(QatLayer::Dense {
                    dense: d.clone(),
                    observer: ObserverState::new(),
                }),
                Layer::GlobalAvgPool => layers.push(QatLayer::GlobalAvgPool),
                Layer::Dropout { p } => layers.push(QatLayer::Dropout { p: *p }),
                other => {
                    return Err(QdError::Structure(format!(
                        "layer {i} ({}) remains unfused; run fuse_layers first",
                        other.kind()
                    )))
                }
            }
        }
        Ok(Self {
            input_observer: ObserverState::new(),
            layers,
            num_classes: model.num_classes,
            width_multiplier: model.width_multiplier,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                QatLayer::FusedConv { conv, .. } => {
                    out.push(&conv.weight);
                    out.push(&conv.bias);
                }
                QatLayer::Dense { dense, .. } => {
                    out.push(&dense.weight);
                    out.push(&dense.bias);
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
                QatLayer::FusedConv { conv, .. } => {
                    out.push(&mut conv.weight);
                    out.push(&mut conv.bias);
                }
                QatLayer::Dense { dense, .. } => {
                    out.push(&mut dense.weight);
                    out.push(&mut dense.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn freeze_observers(&mut self) {
        self.input_observer.freeze();
        for layer in &mut self.layers {
            match layer {
                QatLayer::FusedConv { observer, .. } | QatLayer::Dense { observer, .. } => {
                    observer.freeze()
                }
                _ => {}
            }
        }
    }

    /// Train-mode forward with observer updates and fake quantization.
    pub fn forward_train(
        &mut self,
        batch: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Vec<QatCache>)> {
        self.input_observer.update(batch);
        let in_qp = self.input_observer.qparams()?;
        let (mut x, _) = fake_quantize_with_mask(batch, in_qp);
        let mut last_qp = in_qp;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            match layer {
                QatLayer::FusedConv {
                    conv,
                    relu,
                    observer,
                } => {
                    let w_qp = weight_qparams(&conv.weight)?;
                    let (w_fq, w_mask) = fake_quantize_with_mask(&conv.weight, w_qp);
                    let mut run = conv.clone();
                    run.weight = w_fq.clone();
                    let pre = run.apply(&x)?;
                    let (y, relu_mask) = if *relu {
                        let mask: Vec<bool> = pre.data().iter().map(|&v| v > 0.0).collect();
                        (pre.map(|v| v.max(0.0)), Some(mask))
                    } else {
                        (pre, None)
                    };
                    observer.update(&y);
                    let out_qp = observer.qparams()?;
                    let (y_fq, act_mask) = fake_quantize_with_mask(&y, out_qp);
                    caches.push(QatCache::FusedConv {
                        input: x,
                        w_fq,
                        w_mask,
                        relu_mask,
                        act_mask,
                    });
                    last_qp = out_qp;
                    x = y_fq;
                }
                QatLayer::Dense { dense, observer } => {
                    let w_qp = weight_qparams(&dense.weight)?;
                    let (w_fq, w_mask) = fake_quantize_with_mask(&dense.weight, w_qp);
                    let run = DenseLayer {
                        weight: w_fq.clone(),
                        bias: dense.bias.clone(),
                    };
                    let y = dense_forward(&run, &x)?;
                    observer.update(&y);
                    let out_qp = observer.qparams()?;
                    let (y_fq, act_mask) = fake_quantize_with_mask(&y, out_qp);
                    caches.push(QatCache::Dense {
                        input: x,
                        w_fq,
                        w_mask,
                        act_mask,
                    });
                    last_qp = out_qp;
                    x = y_fq;
                }
                QatLayer::GlobalAvgPool => {
                    let y = global_avg_pool(&x)?;
                    // re-snap to the incoming grid, mirroring the integer mean
                    let (y_fq, act_mask) = fake_quantize_with_mask(&y, last_qp);
                    caches.push(QatCache::Gap {
                        in_shape: x.shape().to_vec(),
                        act_mask,
                    });
                    x = y_fq;
                }
                QatLayer::Dropout { p } => {
                    if *p == 0.0 {
                        caches.push(QatCache::Dropout { mask: None });
                    } else {
                        let keep = 1.0 - *p;
                        let scale = 1.0 / keep;
                        let mask: Vec<f32> = (0..x.numel())
                            .map(|_| if rng.gen::<f32>() < keep { scale } else { 0.0 })
                            .collect();
                        x = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] * mask[i]);
                        caches.push(QatCache::Dropout { mask: Some(mask) });
                    }
                }
            }
        }
        Ok((x, caches))
    }

    /// Eval forward with the current observer statistics; no updates, no
    /// dropout.
    pub fn forward_eval(&self, batch: &Tensor) -> Result<Tensor> {
        let in_qp = self.input_observer.qparams()?;
        let (mut x, _) = fake_quantize_with_mask(batch, in_qp);
        let mut last_qp = in_qp;
        for layer in &self.layers {
            match layer {
                QatLayer::FusedConv {
                    conv,
                    relu,
                    observer,
                } => {
                    let w_qp = weight_qparams(&conv.weight)?;
                    let (w_fq, _) = fake_quantize_with_mask(&conv.weight, w_qp);
                    let mut run = conv.clone();
                    run.weight = w_fq;
                    let mut y = run.apply(&x)?;
                    if *relu {
                        y = y.map(|v| v.max(0.0));
                    }
                    let out_qp = observer.qparams()?;
                    x = super::fake_quantize(&y, out_qp);
                    last_qp = out_qp;
                }
                QatLayer::Dense { dense, observer } => {
                    let w_qp = weight_qparams(&dense.weight)?;
                    let (w_fq, _) = fake_quantize_with_mask(&dense.weight, w_qp);
                    let run = DenseLayer {
                        weight: w_fq,
                        bias: dense.bias.clone(),
                    };
                    let y = dense_forward(&run, &x)?;
                    let out_qp = observer.qparams()?;
                    x = super::fake_quantize(&y, out_qp);
                    last_qp = out_qp;
                }
                QatLayer::GlobalAvgPool => {
                    let y = global_avg_pool(&x)?;
                    x = super::fake_quantize(&y, last_qp);
                }
                QatLayer::Dropout { .. } => {}
            }
        }
        Ok(x)
    }

    /// Parameter gradients with the clipped STE through every fake-quantize
    /// site, aligned with `params()`.
    pub fn backward(&self, caches: &[QatCache], loss_grad: &Tensor) -> Result<Vec<Tensor>> {
        let mut grad = loss_grad.clone();
        let mut per_layer: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            match (layer, cache) {
                (
                    QatLayer::FusedConv { conv, .. },
                    QatCache::FusedConv {
                        input,
                        w_fq,
                        w_mask,
                        relu_mask,
                        act_mask,
                    },
                ) => {
                    let mut g = apply_bool_mask(&grad, act_mask);
                    if let Some(mask) = relu_mask {
                        g = apply_bool_mask(&g, mask);
                    }
                    let mut run = conv.clone();
                    run.weight = w_fq.clone();
                    let (gi, gw, gb) = conv_backward(&run, input, &g)?;
                    per_layer.push(vec![apply_bool_mask(&gw, w_mask), gb]);
                    grad = gi;
                }
                (
                    QatLayer::Dense { dense, .. },
                    QatCache::Dense {
                        input,
                        w_fq,
                        w_mask,
                        act_mask,
                    },
                ) => {
                    let g = apply_bool_mask(&grad, act_mask);
                    let run = DenseLayer {
                        weight: w_fq.clone(),
                        bias: dense.bias.clone(),
                    };
                    let (gi, gw, gb) = dense_backward(&run, input, &g)?;
                    per_layer.push(vec![apply_bool_mask(&gw, w_mask), gb]);
                    grad = gi;
                }
                (QatLayer::GlobalAvgPool, QatCache::Gap { in_shape, act_mask }) => {
                    let g = apply_bool_mask(&grad, act_mask);
                    let (h, w) = (in_shape[2], in_shape[3]);
                    let area = (h * w) as f32;
                    grad = Tensor::from_fn(in_shape.clone(), |i| g.data()[i / (h * w)] / area);
                    per_layer.push(vec![]);
                }
                (QatLayer::Dropout { .. }, QatCache::Dropout { mask }) => {
                    if let Some(m) = mask {
                        grad = Tensor::from_fn(grad.shape().to_vec(), |i| grad.data()[i] * m[i]);
                    }
                    per_layer.push(vec![]);
                }
                _ => {
                    return Err(QdError::Structure(
                        "QAT layer/cache mismatch in backward".into(),
                    ))
                }
            }
        }
        per_layer.reverse();
        Ok(per_layer.into_iter().flatten().collect())
    }
}

fn apply_bool_mask(t: &Tensor, mask: &[bool]) -> Tensor {
    Tensor::from_fn(t.shape().to_vec(), |i| {
        if mask[i] {
            t.data()[i]
        } else {
            0.0
        }
    })
}

/// Post-training calibration: run float forwards through the fused layers and
/// feed the observers, without fake quantization (Alg. 1 step 4, the
/// calibrate branch).
pub fn calibrate(model: &mut QatModel, batches: &[Tensor]) -> Result<()> {
    for batch in batches {
        model.input_observer.update(batch);
        let mut x = batch.clone();
        for layer in &mut model.layers {
            match layer {
                QatLayer::FusedConv {
                    conv,
                    relu,
                    observer,
                } => {
                    let mut y = conv.apply(&x)?;
                    if *relu {
                        y = y.map(|v| v.max(0.0));
                    }
                    observer.update(&y);
                    x = y;
                }
                QatLayer::Dense { dense, observer } => {
                    let y = dense_forward(dense, &x)?;
                    observer.update(&y);
                    x = y;
                }
                QatLayer::GlobalAvgPool => x = global_avg_pool(&x)?,
                QatLayer::Dropout { .. } => {}
            }
        }
    }
    Ok(())
}

/// Quantize the model for inference (Alg. 1 step 5): u8 weights, i32 biases
/// at scale S_in*S_w, activation parameters from the observers, and one
/// requant multiplier per layer.
pub fn convert_to_int8(model: &QatModel) -> Result<QuantizedModel> {
    if model.input_observer.sample_count == 0 {
        return Err(QdError::Unobserved { index: 0 });
    }
    let input_qp = model.input_observer.qparams()?;
    let mut in_qp = input_qp;
    let mut layers = Vec::new();
    for (index, layer) in model.layers.iter().enumerate() {
        match layer {
            QatLayer::FusedConv {
                conv,
                relu,
                observer,
            } => {
                if observer.sample_count == 0 {
                    return Err(QdError::Unobserved { index });
                }
                let weight_qp = weight_qparams(&conv.weight)?;
                let out_qp = observer.qparams()?;
                let weight: Vec<u8> = conv
                    .weight
                    .data()
                    .iter()
                    .map(|&r| quantize(r, weight_qp))
                    .collect();
                let bias_scale = in_qp.scale * weight_qp.scale;
                let bias: Vec<i32> = conv
                    .bias
                    .data()
                    .iter()
                    .map(|&b| (b as f64 / bias_scale).round() as i32)
                    .collect();
                let rm = derive_requant_multiplier(in_qp.scale, weight_qp.scale, out_qp.scale)?;
                layers.push(QLayer::Conv {
                    weight,
                    weight_shape: conv.weight.shape().to_vec(),
                    bias,
                    in_qp,
                    weight_qp,
                    out_qp,
                    rm,
                    stride: conv.stride,
                    padding: conv.padding,
                    depthwise: conv.depthwise,
                    relu: *relu,
                });
                in_qp = out_qp;
            }
            QatLayer::Dense { dense, observer } => {
                if observer.sample_count == 0 {
                    return Err(QdError::Unobserved { index });
                }
                let weight_qp = weight_qparams(&dense.weight)?;
                let out_qp = observer.qparams()?;
                let weight: Vec<u8> = dense
                    .weight
                    .data()
                    .iter()
                    .map(|&r| quantize(r, weight_qp))
                    .collect();
                let bias_scale = in_qp.scale * weight_qp.scale;
                let bias: Vec<i32> = dense
                    .bias
                    .data()
                    .iter()
                    .map(|&b| (b as f64 / bias_scale).round() as i32)
                    .collect();
                let rm = derive_requant_multiplier(in_qp.scale, weight_qp.scale, out_qp.scale)?;
                layers.push(QLayer::Dense {
                    weight,
                    weight_shape: dense.weight.shape().to_vec(),
                    bias,
                    in_qp,
                    weight_qp,
                    out_qp,
                    rm,
                });
                in_qp = out_qp;
            }
            QatLayer::GlobalAvgPool => layers.push(QLayer::GlobalAvgPool),
            QatLayer::Dropout { .. } => {} // inference no-op
        }
    }
    let qmodel = QuantizedModel {
        input_qp,
        layers,
        num_classes: model.num_classes,
        width_multiplier: model.width_multiplier,
    };
    qmodel.validate()?;
    Ok(qmodel)
}
