//! Dense row-major tensors and the float compute kernels shared by training
//! and the float inference baseline.
//!
//! Activations are NCHW, conv weights are OIHW. Accumulation inside matmul
//! and the convolution kernels happens in f64, results are stored as f32.

use crate::error::{QdError, Result};
use rayon::prelude::*;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(QdError::InvalidShape(format!(
                "rank must be 1..=4, got {:?}",
                shape
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(QdError::InvalidShape(format!(
                "zero-sized dimension in {:?}",
                shape
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(QdError::InvalidShape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel]).expect("zeros: invalid shape")
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("full: invalid shape")
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Self::new(shape, data).expect("from_fn: invalid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the backing storage. Reserved for the optimizer and
    /// loaders; public operations never alias tensors, so handing out a
    /// unique borrow is safe.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32 + Sync) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Row-major offset for a rank-4 index.
    #[inline]
    pub fn idx4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }
}

/// Output spatial size of a convolution; errors when the stride does not
/// divide evenly.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(QdError::InvalidShape(format!(
            "kernel {} larger than padded input {}",
            kernel, padded
        )));
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(QdError::InvalidShape(format!(
            "non-integral output size: ({} + 2*{} - {}) not divisible by stride {}",
            input, padding, kernel, stride
        )));
    }
    Ok(span / stride + 1)
}

/// C[i,k] = sum_j A[i,j] * B[j,k], accumulated in f64.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(QdError::InvalidShape(format!(
            "matmul expects rank-2 operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(QdError::ShapeMismatch {
            context: "matmul inner dimensions".into(),
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let mut acc = vec![0.0f64; n];
        for j in 0..k {
            let aij = a.data[i * k + j] as f64;
            let brow = &b.data[j * n..(j + 1) * n];
            for (accv, &bv) in acc.iter_mut().zip(brow) {
                *accv += aij * bv as f64;
            }
        }
        for (o, accv) in row.iter_mut().zip(&acc) {
            *o = *accv as f32;
        }
    });
    Tensor::new(vec![m, n], out)
}

fn check_conv_shapes(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<()> {
    if input.shape.len() != 4 {
        return Err(QdError::InvalidShape(format!(
            "conv input must be NCHW, got {:?}",
            input.shape
        )));
    }
    if weight.shape.len() != 4 {
        return Err(QdError::InvalidShape(format!(
            "conv weight must be OIHW, got {:?}",
            weight.shape
        )));
    }
    if bias.shape.len() != 1 || bias.shape[0] != weight.shape[0] {
        return Err(QdError::ShapeMismatch {
            context: "conv bias vs output channels".into(),
            lhs: bias.shape.clone(),
            rhs: vec![weight.shape[0]],
        });
    }
    Ok(())
}

/// Adds `wv * input` into the accumulator plane for one kernel tap (ky, kx),
/// over the output positions whose receptive field stays inside the input.
/// Contributions land in ascending (y, x) order, so per-element accumulation
/// order is the same as a scalar loop nest.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_tap(
    acc: &mut [f64],
    in_plane: &[f32],
    wv: f64,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
    ky: usize,
    kx: usize,
) {
    // valid output range for iy = y*stride + ky - padding in [0, h)
    let lo = |k: usize, limit: usize| -> (usize, usize) {
        let start = (padding as isize - k as isize).max(0) as usize;
        let lo = start.div_ceil(stride);
        let top = limit as isize - 1 - k as isize + padding as isize;
        let hi = if top < 0 { 0 } else { top as usize / stride + 1 };
        (lo, hi)
    };
    let (y_lo, y_hi) = lo(ky, h);
    let (x_lo, x_hi) = lo(kx, w);
    let (y_hi, x_hi) = (y_hi.min(oh), x_hi.min(ow));
    if y_lo >= y_hi || x_lo >= x_hi {
        return;
    }
    for y in y_lo..y_hi {
        let iy = y * stride + ky - padding;
        let in_row = &in_plane[iy * w..iy * w + w];
        let acc_row = &mut acc[y * ow..y * ow + ow];
        if stride == 1 {
            let ix0 = x_lo + kx - padding;
            let len = x_hi - x_lo;
            for (a, &iv) in acc_row[x_lo..x_hi].iter_mut().zip(&in_row[ix0..ix0 + len]) {
                *a += wv * iv as f64;
            }
        } else {
            for x in x_lo..x_hi {
                acc_row[x] += wv * in_row[x * stride + kx - padding] as f64;
            }
        }
    }
}

/// Standard cross-correlation with per-output-channel bias.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    check_conv_shapes(input, weight, bias)?;
    let (n, ci, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    let (co, ciw, kh, kw) = (
        weight.shape[0],
        weight.shape[1],
        weight.shape[2],
        weight.shape[3],
    );
    if ci != ciw {
        return Err(QdError::ShapeMismatch {
            context: "conv input channels vs weight".into(),
            lhs: input.shape.clone(),
            rhs: weight.shape.clone(),
        });
    }
    let oh = conv_out_dim(h, kh, stride, padding)?;
    let ow = conv_out_dim(w, kw, stride, padding)?;
    let mut out = vec![0.0f32; n * co * oh * ow];
    out.par_chunks_mut(co * oh * ow)
        .enumerate()
        .for_each(|(ni, sample)| {
            let mut acc = vec![0.0f64; oh * ow];
            for o in 0..co {
                acc.fill(bias.data[o] as f64);
                for c in 0..ci {
                    let in_plane = &input.data[(ni * ci + c) * h * w..(ni * ci + c + 1) * h * w];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv =
                                weight.data[((o * ci + c) * kh + ky) * kw + kx] as f64;
                            accumulate_tap(
                                &mut acc, in_plane, wv, h, w, oh, ow, stride, padding, ky, kx,
                            );
                        }
                    }
                }
                for (o_el, &a) in sample[o * oh * ow..(o + 1) * oh * ow]
                    .iter_mut()
                    .zip(&acc)
                {
                    *o_el = a as f32;
                }
            }
        });
    Tensor::new(vec![n, co, oh, ow], out)
}

/// One 1-channel filter per input channel; channel c of the output depends
/// only on channel c of the input.
pub fn depthwise_conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    check_conv_shapes(input, weight, bias)?;
    let (n, c, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    let (cw, one, kh, kw) = (
        weight.shape[0],
        weight.shape[1],
        weight.shape[2],
        weight.shape[3],
    );
    if cw != c || one != 1 {
        return Err(QdError::ShapeMismatch {
            context: "depthwise conv expects weight [C,1,Kh,Kw] matching input channels".into(),
            lhs: input.shape.clone(),
            rhs: weight.shape.clone(),
        });
    }
    let oh = conv_out_dim(h, kh, stride, padding)?;
    let ow = conv_out_dim(w, kw, stride, padding)?;
    let mut out = vec![0.0f32; n * c * oh * ow];
    out.par_chunks_mut(c * oh * ow)
        .enumerate()
        .for_each(|(ni, sample)| {
            let mut acc = vec![0.0f64; oh * ow];
            for ch in 0..c {
                acc.fill(bias.data[ch] as f64);
                let in_plane = &input.data[(ni * c + ch) * h * w..(ni * c + ch + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = weight.data[(ch * kh + ky) * kw + kx] as f64;
                        accumulate_tap(
                            &mut acc, in_plane, wv, h, w, oh, ow, stride, padding, ky, kx,
                        );
                    }
                }
                for (o_el, &a) in sample[ch * oh * ow..(ch + 1) * oh * ow]
                    .iter_mut()
                    .zip(&acc)
                {
                    *o_el = a as f32;
                }
            }
        });
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Mean over the spatial dimensions: [N,C,H,W] -> [N,C].
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    if input.shape.len() != 4 {
        return Err(QdError::InvalidShape(format!(
            "global_avg_pool expects NCHW, got {:?}",
            input.shape
        )));
    }
    let (n, c, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    let area = (h * w) as f64;
    let mut out = vec![0.0f32; n * c];
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * h * w;
            let mut acc = 0.0f64;
            for i in 0..h * w {
                acc += input.data[base + i] as f64;
            }
            out[ni * c + ch] = (acc / area) as f32;
        }
    }
    Tensor::new(vec![n, c], out)
}
