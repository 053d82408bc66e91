//! Affine uint8 quantization: scale/zero-point parameters, min/max observers,
//! fake quantization for QAT, batchnorm folding, and the fixed-point
//! requantization multiplier.
//!
//! The scheme is asymmetric affine over [0,255]: r = S(q - Z) with
//! q = clamp(round(r/S) + Z, 0, 255). Rounding is half-away-from-zero
//! everywhere.

mod fuse;
mod qat;

pub use fuse::{fold_batchnorm, fuse_layers};
pub use qat::{calibrate, convert_to_int8, QatCache, QatLayer, QatModel};

use crate::error::{QdError, Result};
use crate::tensor::Tensor;

/// Per-tensor quantization parameters. The real zero is always exactly
/// representable: dequantize(Z) == 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: u8,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: u8) -> Self {
        assert!(scale > 0.0, "scale must be positive");
        Self { scale, zero_point }
    }
}

/// S and Z from an observed [min, max] range. The range is first extended to
/// include zero so Z stays representable.
pub fn compute_qparams(min: f32, max: f32) -> Result<QuantParams> {
    if min.is_nan() || max.is_nan() {
        return Err(QdError::Numeric("NaN range in compute_qparams".into()));
    }
    if min > max {
        return Err(QdError::Quant(format!("min {} > max {}", min, max)));
    }
    let lo = (min as f64).min(0.0);
    let hi = (max as f64).max(0.0);
    if lo == 0.0 && hi == 0.0 {
        return Ok(QuantParams::new(1.0, 0));
    }
    let scale = (hi - lo) / 255.0;
    let z = (-lo / scale).round();
    let zero_point = z.clamp(0.0, 255.0) as u8;
    Ok(QuantParams::new(scale, zero_point))
}

/// q = clamp(round(r/S) + Z, 0, 255). Out-of-range reals saturate.
#[inline]
pub fn quantize(r: f32, qp: QuantParams) -> u8 {
    let q = (r as f64 / qp.scale).round() + qp.zero_point as f64;
    q.clamp(0.0, 255.0) as u8
}

/// r = S(q - Z).
#[inline]
pub fn dequantize(q: u8, qp: QuantParams) -> f32 {
    (qp.scale * (q as f64 - qp.zero_point as f64)) as f32
}

/// Running min/max statistics for one observed tensor site. The tracked
/// range always includes zero. Frozen observers ignore updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObserverState {
    pub running_min: f32,
    pub running_max: f32,
    pub frozen: bool,
    pub sample_count: u64,
}

impl Default for ObserverState {
    fn default() -> Self {
        Self::new()
    }
}

impl ObserverState {
    pub fn new() -> Self {
        Self {
            running_min: 0.0,
            running_max: 0.0,
            frozen: false,
            sample_count: 0,
        }
    }

    pub fn update(&mut self, t: &Tensor) {
        if self.frozen {
            return;
        }
        self.running_min = self.running_min.min(t.min()).min(0.0);
        self.running_max = self.running_max.max(t.max()).max(0.0);
        self.sample_count += 1;
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn qparams(&self) -> Result<QuantParams> {
        compute_qparams(self.running_min, self.running_max)
    }
}

/// The real requantization multiplier M = S1*S2/S3 encoded as
/// m0_fixed / 2^31 * 2^-shift with m0_fixed in [2^30, 2^31).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RequantMultiplier {
    pub m0_fixed: i32,
    pub shift: u32,
}

impl RequantMultiplier {
    /// Reconstructed real multiplier, for diagnostics and tests.
    pub fn reconstruct(&self) -> f64 {
        self.m0_fixed as f64 / (1u64 << 31) as f64 / (1u64 << self.shift) as f64
    }
}

pub fn derive_requant_multiplier(s1: f64, s2: f64, s3: f64) -> Result<RequantMultiplier> {
    if !(s1 > 0.0 && s2 > 0.0 && s3 > 0.0) {
        return Err(QdError::Quant(format!(
            "scales must be positive: {s1}, {s2}, {s3}"
        )));
    }
    let m = s1 * s2 / s3;
    if !m.is_finite() {
        return Err(QdError::Numeric("non-finite requant multiplier".into()));
    }
    if m >= 1.0 {
        return Err(QdError::MultiplierOutOfRange { m });
    }
    let mut shift = 0u32;
    let mut m0 = m;
    while m0 < 0.5 {
        m0 *= 2.0;
        shift += 1;
        if shift > 31 {
            return Err(QdError::Quant(format!(
                "requant multiplier {m} too small to encode (shift > 31)"
            )));
        }
    }
    let mut fixed = (m0 * (1u64 << 31) as f64).round() as i64;
    if fixed == 1 << 31 {
        // m0 rounded up to 1.0
        if shift > 0 {
            shift -= 1;
            fixed = 1 << 30;
        } else {
            fixed = (1 << 31) - 1;
        }
    }
    debug_assert!((1 << 30..1 << 31).contains(&fixed));
    Ok(RequantMultiplier {
        m0_fixed: fixed as i32,
        shift,
    })
}

/// Integer-only scaling of a 32-bit accumulator to the uint8 output grid:
/// clamp(z3 + round_half_away(acc * m0_fixed / 2^(31+shift)), 0, 255).
#[inline]
pub fn requantize(acc: i32, rm: RequantMultiplier, z3: u8) -> u8 {
    let prod = acc as i64 * rm.m0_fixed as i64;
    let total_shift = 31 + rm.shift;
    let half = 1i64 << (total_shift - 1);
    let rounded = if prod >= 0 {
        (prod + half) >> total_shift
    } else {
        -((-prod + half) >> total_shift)
    };
    (z3 as i64 + rounded).clamp(0, 255) as u8
}

/// Elementwise quantize-then-dequantize. The training backward pass uses the
/// clipped straight-through estimator: gradients pass where the quantizer did
/// not saturate (see [`fake_quantize_with_mask`]).
pub fn fake_quantize(t: &Tensor, qp: QuantParams) -> Tensor {
    t.map(|r| dequantize(quantize(r, qp), qp))
}

/// Fake quantization plus the in-range mask driving the clipped STE:
/// mask[i] is true where the element did not saturate.
pub fn fake_quantize_with_mask(t: &Tensor, qp: QuantParams) -> (Tensor, Vec<bool>) {
    let mut mask = Vec::with_capacity(t.numel());
    let out = Tensor::from_fn(t.shape().to_vec(), |i| {
        let r = t.data()[i];
        let raw = (r as f64 / qp.scale).round() + qp.zero_point as f64;
        mask.push((0.0..=255.0).contains(&raw));
        dequantize(raw.clamp(0.0, 255.0) as u8, qp)
    });
    (out, mask)
}
