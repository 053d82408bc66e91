//! Layer kinds, their forward passes and analytic gradients.

use crate::error::{QdError, Result};
use crate::tensor::{conv2d, conv_out_dim, depthwise_conv2d, global_avg_pool, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: Tensor, // [O,I,Kh,Kw]; depthwise: [C,1,Kh,Kw]
    pub bias: Tensor,   // [O]
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
}

impl Conv2dLayer {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        if self.depthwise {
            depthwise_conv2d(input, &self.weight, &self.bias, self.stride, self.padding)
        } else {
            conv2d(input, &self.weight, &self.bias, self.stride, self.padding)
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: Tensor, // [out,in]
    pub bias: Tensor,   // [out]
}

/// Per-channel batch normalization state: gamma/beta are trainable, the
/// running statistics feed eval-mode forward and batchnorm folding.
#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f32,
    pub momentum: f32,
    /// Frozen batchnorm normalizes with running stats even in train mode and
    /// stops updating them.
    pub frozen: bool,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], 1.0),
            // MobileNet-style epsilon: bounds the folded gain gamma/sqrt(var+eps)
            // for collapsed-variance (dead) channels, which would otherwise
            // explode the fused weight range and ruin per-tensor quantization
            epsilon: 1e-3,
            momentum: 0.1,
            frozen: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FusedConvLayer {
    pub conv: Conv2dLayer,
    pub relu: bool,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2dLayer),
    BatchNorm(BatchNormLayer),
    Relu,
    GlobalAvgPool,
    Dropout { p: f32 },
    Dense(DenseLayer),
    FusedConv(FusedConvLayer),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(c) if c.depthwise => "DepthwiseConv",
            Layer::Conv(_) => "Conv",
            Layer::BatchNorm(_) => "BatchNorm",
            Layer::Relu => "ReLU",
            Layer::GlobalAvgPool => "GlobalAvgPool",
            Layer::Dropout { .. } => "Dropout",
            Layer::Dense(_) => "Dense",
            Layer::FusedConv(_) => "FusedConv",
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Layer::Conv(c) => c.weight.numel() + c.bias.numel(),
            Layer::BatchNorm(b) => b.gamma.numel() + b.beta.numel(),
            Layer::Dense(d) => d.weight.numel() + d.bias.numel(),
            Layer::FusedConv(f) => f.conv.weight.numel() + f.conv.bias.numel(),
            _ => 0,
        }
    }
}

#[derive(Clone, Debug)]
pub enum LayerCache {
    Conv {
        input: Tensor,
    },
    BatchNorm {
        x_hat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        mask: Vec<bool>,
    },
    Gap {
        in_shape: Vec<usize>,
    },
    Dropout {
        // per-element keep scale (0 or 1/(1-p)); None when inactive
        mask: Option<Vec<f32>>,
    },
    Dense {
        input: Tensor,
    },
    FusedConv {
        input: Tensor,
        relu_mask: Option<Vec<bool>>,
    },
    None,
}

impl Layer {
    pub fn forward(
        &mut self,
        input: &Tensor,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, LayerCache)> {
        match self {
            Layer::Conv(conv) => {
                let out = conv.apply(input)?;
                Ok((
                    out,
                    LayerCache::Conv {
                        input: input.clone(),
                    },
                ))
            }
            Layer::BatchNorm(bn) => batchnorm_forward(bn, input, mode),
            Layer::Relu => {
                let mask: Vec<bool> = input.data().iter().map(|&x| x > 0.0).collect();
                let out = input.map(|x| x.max(0.0));
                Ok((out, LayerCache::Relu { mask }))
            }
            Layer::GlobalAvgPool => {
                let out = global_avg_pool(input)?;
                Ok((
                    out,
                    LayerCache::Gap {
                        in_shape: input.shape().to_vec(),
                    },
                ))
            }
            Layer::Dropout { p } => {
                if mode == Mode::Eval || *p == 0.0 {
                    return Ok((input.clone(), LayerCache::Dropout { mask: None }));
                }
                let keep = 1.0 - *p;
                let scale = 1.0 / keep;
                let mask: Vec<f32> = (0..input.numel())
                    .map(|_| if rng.gen::<f32>() < keep { scale } else { 0.0 })
                    .collect();
                let out = Tensor::from_fn(input.shape().to_vec(), |i| input.data()[i] * mask[i]);
                Ok((out, LayerCache::Dropout { mask: Some(mask) }))
            }
            Layer::Dense(dense) => {
                let out = dense_forward(dense, input)?;
                Ok((
                    out,
                    LayerCache::Dense {
                        input: input.clone(),
                    },
                ))
            }
            Layer::FusedConv(fused) => {
                let pre = fused.conv.apply(input)?;
                if fused.relu {
                    let mask: Vec<bool> = pre.data().iter().map(|&x| x > 0.0).collect();
                    let out = pre.map(|x| x.max(0.0));
                    Ok((
                        out,
                        LayerCache::FusedConv {
                            input: input.clone(),
                            relu_mask: Some(mask),
                        },
                    ))
                } else {
                    Ok((
                        pre,
                        LayerCache::FusedConv {
                            input: input.clone(),
                            relu_mask: None,
                        },
                    ))
                }
            }
        }
    }

    /// Read-only eval-mode forward: running BN statistics, no dropout.
    pub fn forward_eval(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(conv) => conv.apply(input),
            Layer::BatchNorm(bn) => {
                if input.shape().len() != 4 || input.shape()[1] != bn.gamma.numel() {
                    return Err(QdError::ShapeMismatch {
                        context: "batchnorm channels".into(),
                        lhs: input.shape().to_vec(),
                        rhs: vec![bn.gamma.numel()],
                    });
                }
                let (n, c, hw) = (
                    input.shape()[0],
                    input.shape()[1],
                    input.shape()[2] * input.shape()[3],
                );
                let mut out = vec![0.0f32; input.numel()];
                for ni in 0..n {
                    for ch in 0..c {
                        let rv = bn.running_var.data()[ch];
                        if rv < 0.0 {
                            return Err(QdError::Numeric("negative running variance".into()));
                        }
                        let inv = 1.0 / (rv as f64 + bn.epsilon as f64).sqrt();
                        let g = bn.gamma.data()[ch] as f64;
                        let b = bn.beta.data()[ch] as f64;
                        let mu = bn.running_mean.data()[ch] as f64;
                        let base = (ni * c + ch) * hw;
                        for i in 0..hw {
                            out[base + i] =
                                (g * (input.data()[base + i] as f64 - mu) * inv + b) as f32;
                        }
                    }
                }
                Tensor::new(input.shape().to_vec(), out)
            }
            Layer::Relu => Ok(input.map(|x| x.max(0.0))),
            Layer::GlobalAvgPool => global_avg_pool(input),
            Layer::Dropout { .. } => Ok(input.clone()),
            Layer::Dense(dense) => dense_forward(dense, input),
            Layer::FusedConv(fused) => {
                let pre = fused.conv.apply(input)?;
                if fused.relu {
                    Ok(pre.map(|x| x.max(0.0)))
                } else {
                    Ok(pre)
                }
            }
        }
    }

    /// Gradient of the loss w.r.t. this layer's input and parameters.
    /// Parameter gradients follow the same order as `Model::params`.
    pub fn backward(&self, cache: &LayerCache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        match (self, cache) {
            (Layer::Conv(conv), LayerCache::Conv { input }) => {
                let (gi, gw, gb) = conv_backward(conv, input, grad_out)?;
                Ok((gi, vec![gw, gb]))
            }
            (Layer::BatchNorm(bn), LayerCache::BatchNorm { x_hat, inv_std, batch_stats }) => {
                batchnorm_backward(bn, x_hat, inv_std, *batch_stats, grad_out)
            }
            (Layer::Relu, LayerCache::Relu { mask }) => {
                let gi = Tensor::from_fn(grad_out.shape().to_vec(), |i| {
                    if mask[i] {
                        grad_out.data()[i]
                    } else {
                        0.0
                    }
                });
                Ok((gi, vec![]))
            }
            (Layer::GlobalAvgPool, LayerCache::Gap { in_shape }) => {
                let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let area = (h * w) as f32;
                let gi = Tensor::from_fn(in_shape.clone(), |i| {
                    let nc = i / (h * w);
                    grad_out.data()[nc] / area
                });
                let _ = (n, c);
                Ok((gi, vec![]))
            }
            (Layer::Dropout { .. }, LayerCache::Dropout { mask }) => {
                let gi = match mask {
                    None => grad_out.clone(),
                    Some(m) => {
                        Tensor::from_fn(grad_out.shape().to_vec(), |i| grad_out.data()[i] * m[i])
                    }
                };
                Ok((gi, vec![]))
            }
            (Layer::Dense(dense), LayerCache::Dense { input }) => {
                let (gi, gw, gb) = dense_backward(dense, input, grad_out)?;
                Ok((gi, vec![gw, gb]))
            }
            (Layer::FusedConv(fused), LayerCache::FusedConv { input, relu_mask }) => {
                let g = match relu_mask {
                    Some(mask) => Tensor::from_fn(grad_out.shape().to_vec(), |i| {
                        if mask[i] {
                            grad_out.data()[i]
                        } else {
                            0.0
                        }
                    }),
                    None => grad_out.clone(),
                };
                let (gi, gw, gb) = conv_backward(&fused.conv, input, &g)?;
                Ok((gi, vec![gw, gb]))
            }
            _ => Err(QdError::Structure(
                "layer/cache mismatch in backward".into(),
            )),
        }
    }
}

pub fn dense_forward(dense: &DenseLayer, input: &Tensor) -> Result<Tensor> {
    if input.shape().len() != 2 || input.shape()[1] != dense.weight.shape()[1] {
        return Err(QdError::ShapeMismatch {
            context: "dense input vs weight".into(),
            lhs: input.shape().to_vec(),
            rhs: dense.weight.shape().to_vec(),
        });
    }
    let (n, d_in) = (input.shape()[0], input.shape()[1]);
    let d_out = dense.weight.shape()[0];
    let mut out = vec![0.0f32; n * d_out];
    for ni in 0..n {
        for o in 0..d_out {
            let mut acc = dense.bias.data()[o] as f64;
            for i in 0..d_in {
                acc += input.data()[ni * d_in + i] as f64 * dense.weight.data()[o * d_in + i] as f64;
            }
            out[ni * d_out + o] = acc as f32;
        }
    }
    Tensor::new(vec![n, d_out], out)
}

pub fn dense_backward(
    dense: &DenseLayer,
    input: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d_in) = (input.shape()[0], input.shape()[1]);
    let d_out = dense.weight.shape()[0];
    let mut gw = vec![0.0f64; d_out * d_in];
    let mut gb = vec![0.0f64; d_out];
    let mut gi = vec![0.0f32; n * d_in];
    for ni in 0..n {
        for o in 0..d_out {
            let g = grad_out.data()[ni * d_out + o] as f64;
            gb[o] += g;
            for i in 0..d_in {
                gw[o * d_in + i] += g * input.data()[ni * d_in + i] as f64;
            }
        }
        for i in 0..d_in {
            let mut acc = 0.0f64;
            for o in 0..d_out {
                acc += grad_out.data()[ni * d_out + o] as f64 * dense.weight.data()[o * d_in + i] as f64;
            }
            gi[ni * d_in + i] = acc as f32;
        }
    }
    Ok((
        Tensor::new(vec![n, d_in], gi)?,
        Tensor::new(vec![d_out, d_in], gw.iter().map(|&x| x as f32).collect())?,
        Tensor::new(vec![d_out], gb.iter().map(|&x| x as f32).collect())?,
    ))
}

fn batchnorm_forward(
    bn: &mut BatchNormLayer,
    input: &Tensor,
    mode: Mode,
) -> Result<(Tensor, LayerCache)> {
    if input.shape().len() != 4 || input.shape()[1] != bn.gamma.numel() {
        return Err(QdError::ShapeMismatch {
            context: "batchnorm channels".into(),
            lhs: input.shape().to_vec(),
            rhs: vec![bn.gamma.numel()],
        });
    }
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let m = (n * h * w) as f64;
    let use_batch_stats = mode == Mode::Train && !bn.frozen;

    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    if use_batch_stats {
        for ch in 0..c {
            let mut s = 0.0f64;
            let mut s2 = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ch) * h * w;
                for i in 0..h * w {
                    let v = input.data()[base + i] as f64;
                    s += v;
                    s2 += v * v;
                }
            }
            mean[ch] = s / m;
            var[ch] = (s2 / m - mean[ch] * mean[ch]).max(0.0);
        }
        // update running stats (biased variance)
        let mom = bn.momentum as f64;
        for ch in 0..c {
            let rm = bn.running_mean.data()[ch] as f64;
            let rv = bn.running_var.data()[ch] as f64;
            bn.running_mean.data_mut()[ch] = ((1.0 - mom) * rm + mom * mean[ch]) as f32;
            bn.running_var.data_mut()[ch] = ((1.0 - mom) * rv + mom * var[ch]) as f32;
        }
    } else {
        for ch in 0..c {
            let v = bn.running_var.data()[ch];
            if v < 0.0 {
                return Err(QdError::Numeric("negative running variance".into()));
            }
            mean[ch] = bn.running_mean.data()[ch] as f64;
            var[ch] = v as f64;
        }
    }

    let inv_std: Vec<f64> = var
        .iter()
        .map(|&v| 1.0 / (v + bn.epsilon as f64).sqrt())
        .collect();
    let mut x_hat = vec![0.0f32; input.numel()];
    let mut out = vec![0.0f32; input.numel()];
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * h * w;
            let g = bn.gamma.data()[ch] as f64;
            let b = bn.beta.data()[ch] as f64;
            for i in 0..h * w {
                let xh = (input.data()[base + i] as f64 - mean[ch]) * inv_std[ch];
                x_hat[base + i] = xh as f32;
                out[base + i] = (g * xh + b) as f32;
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        LayerCache::BatchNorm {
            x_hat: Tensor::new(input.shape().to_vec(), x_hat)?,
            inv_std,
            batch_stats: use_batch_stats,
        },
    ))
}

fn batchnorm_backward(
    bn: &BatchNormLayer,
    x_hat: &Tensor,
    inv_std: &[f64],
    batch_stats: bool,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    let shape = x_hat.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let m = (n * h * w) as f64;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * h * w;
            for i in 0..h * w {
                let g = grad_out.data()[base + i] as f64;
                dgamma[ch] += g * x_hat.data()[base + i] as f64;
                dbeta[ch] += g;
            }
        }
    }
    let mut gi = vec![0.0f32; x_hat.numel()];
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * h * w;
            let gamma = bn.gamma.data()[ch] as f64;
            for i in 0..h * w {
                let g = grad_out.data()[base + i] as f64;
                let v = if batch_stats {
                    gamma * inv_std[ch]
                        * (g - dbeta[ch] / m - x_hat.data()[base + i] as f64 * dgamma[ch] / m)
                } else {
                    gamma * inv_std[ch] * g
                };
                gi[base + i] = v as f32;
            }
        }
    }
    Ok((
        Tensor::new(shape, gi)?,
        vec![
            Tensor::new(vec![c], dgamma.iter().map(|&x| x as f32).collect())?,
            Tensor::new(vec![c], dbeta.iter().map(|&x| x as f32).collect())?,
        ],
    ))
}

/// Gradients of a (possibly depthwise) convolution w.r.t. input, weight, bias.
pub fn conv_backward(
    conv: &Conv2dLayer,
    input: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let ish = input.shape().to_vec();
    let (n, ci, h, w) = (ish[0], ish[1], ish[2], ish[3]);
    let wsh = conv.weight.shape().to_vec();
    let (co, kh, kw) = (wsh[0], wsh[2], wsh[3]);
    let oh = conv_out_dim(h, kh, conv.stride, conv.padding)?;
    let ow = conv_out_dim(w, kw, conv.stride, conv.padding)?;
    if grad_out.shape() != [n, co, oh, ow] {
        return Err(QdError::ShapeMismatch {
            context: "conv_backward grad_out".into(),
            lhs: grad_out.shape().to_vec(),
            rhs: vec![n, co, oh, ow],
        });
    }
    let stride_u = conv.stride;
    let padding_u = conv.padding;
    // valid output index range for i = y*stride + k - padding in [0, limit)
    let tap_range = |k: usize, limit: usize, out_limit: usize| -> (usize, usize) {
        let start = (padding_u as isize - k as isize).max(0) as usize;
        let lo = start.div_ceil(stride_u);
        let top = limit as isize - 1 - k as isize + padding_u as isize;
        let hi = if top < 0 { 0 } else { top as usize / stride_u + 1 };
        (lo, hi.min(out_limit))
    };

    // per-sample contributions, reduced in sample order for determinism
    let per_sample: Vec<(Vec<f32>, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let mut gi = vec![0.0f64; ci * h * w];
            let mut gw = vec![0.0f64; conv.weight.numel()];
            let mut gb = vec![0.0f64; co];
            for o in 0..co {
                let g_plane = &grad_out.data()[(ni * co + o) * oh * ow..(ni * co + o + 1) * oh * ow];
                for &g in g_plane {
                    gb[o] += g as f64;
                }
                // depthwise: output channel o reads only input channel o
                let (c_lo, c_hi) = if conv.depthwise { (o, o + 1) } else { (0, ci) };
                for c in c_lo..c_hi {
                    let wc = if conv.depthwise { 0 } else { c };
                    let in_plane = &input.data()[(ni * ci + c) * h * w..(ni * ci + c + 1) * h * w];
                    let gi_plane = &mut gi[c * h * w..(c + 1) * h * w];
                    for ky in 0..kh {
                        let (y_lo, y_hi) = tap_range(ky, h, oh);
                        for kx in 0..kw {
                            let (x_lo, x_hi) = tap_range(kx, w, ow);
                            if y_lo >= y_hi || x_lo >= x_hi {
                                continue;
                            }
                            let w_idx = ((o * wsh[1] + wc) * kh + ky) * kw + kx;
                            let wv = conv.weight.data()[w_idx] as f64;
                            let mut dot = 0.0f64;
                            for y in y_lo..y_hi {
                                let iy = y * stride_u + ky - padding_u;
                                let g_row = &g_plane[y * ow + x_lo..y * ow + x_hi];
                                if stride_u == 1 {
                                    let ix0 = x_lo + kx - padding_u;
                                    let len = x_hi - x_lo;
                                    let in_row = &in_plane[iy * w + ix0..iy * w + ix0 + len];
                                    let gi_row =
                                        &mut gi_plane[iy * w + ix0..iy * w + ix0 + len];
                                    for ((gi_el, &iv), &g) in
                                        gi_row.iter_mut().zip(in_row).zip(g_row)
                                    {
                                        let gf = g as f64;
                                        dot += gf * iv as f64;
                                        *gi_el += wv * gf;
                                    }
                                } else {
                                    for (x, &g) in (x_lo..x_hi).zip(g_row) {
                                        let ix = x * stride_u + kx - padding_u;
                                        let gf = g as f64;
                                        dot += gf * in_plane[iy * w + ix] as f64;
                                        gi_plane[iy * w + ix] += wv * gf;
                                    }
                                }
                            }
                            gw[w_idx] += dot;
                        }
                    }
                }
            }
            (gi.iter().map(|&x| x as f32).collect(), gw, gb)
        })
        .collect();

    let mut grad_input = vec![0.0f32; input.numel()];
    let mut grad_weight = vec![0.0f64; conv.weight.numel()];
    let mut grad_bias = vec![0.0f64; co];
    for (ni, (gi, gw, gb)) in per_sample.into_iter().enumerate() {
        grad_input[ni * ci * h * w..(ni + 1) * ci * h * w].copy_from_slice(&gi);
        for (a, b) in grad_weight.iter_mut().zip(&gw) {
            *a += b;
        }
        for (a, b) in grad_bias.iter_mut().zip(&gb) {
            *a += b;
        }
    }
    Ok((
        Tensor::new(ish, grad_input)?,
        Tensor::new(wsh, grad_weight.iter().map(|&x| x as f32).collect())?,
        Tensor::new(vec![co], grad_bias.iter().map(|&x| x as f32).collect())?,
    ))
}
