//! Fake quantizers for activations (asymmetric) and weights (symmetric).
//!
//! Backward rules: rounding is treated as identity, so the gradient to the
//! input passes through inside the clipping range. Clipping bounds receive
//! gradient only from the elements clipped to them. The bit-width receives
//! gradient through the scaling factor, `(round(v/S) - v/S) * dS/db`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BIT_MIN: u32 = 2;
pub const BIT_MAX: u32 = 8;

/// Learnable activation clipping range `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActQuant {
    pub lower: f32,
    pub upper: f32,
}

impl ActQuant {
    pub fn new(lower: f32, upper: f32) -> Result<Self> {
        let q = ActQuant { lower, upper };
        q.check()?;
        Ok(q)
    }

    pub fn check(&self) -> Result<()> {
        if self.lower < self.upper && self.lower.is_finite() && self.upper.is_finite() {
            Ok(())
        } else {
            Err(Error::DegenerateRange {
                lower: self.lower,
                upper: self.upper,
            })
        }
    }

    pub fn step(&self, bits: u32) -> f32 {
        (self.upper - self.lower) / levels(bits)
    }
}

/// Learnable symmetric weight bound `[-bound, bound]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WgtQuant {
    pub bound: f32,
}

impl WgtQuant {
    pub fn new(bound: f32) -> Result<Self> {
        let q = WgtQuant { bound };
        q.check()?;
        Ok(q)
    }

    pub fn check(&self) -> Result<()> {
        if self.bound > 0.0 && self.bound.is_finite() {
            Ok(())
        } else {
            Err(Error::NonPositiveBound(self.bound))
        }
    }

    pub fn step(&self, bits: u32) -> f32 {
        2.0 * self.bound / (levels(bits) - 1.0)
    }
}

/// Continuous bit-width carrier; forward passes use the rounded, clamped
/// value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitValue {
    pub cont: f32,
}

impl BitValue {
    pub fn new(cont: f32) -> Self {
        BitValue { cont }
    }

    pub fn fixed(bits: u32) -> Self {
        BitValue { cont: bits as f32 }
    }

    pub fn effective(&self) -> u32 {
        effective_bits(self.cont)
    }
}

pub fn effective_bits(cont: f32) -> u32 {
    let r = cont.round();
    if r.is_nan() {
        return BIT_MIN;
    }
    r.clamp(BIT_MIN as f32, BIT_MAX as f32) as u32
}

/// `2^b - 1`, the number of steps of a b-bit grid.
fn levels(bits: u32) -> f32 {
    ((1u64 << bits) - 1) as f32
}

/// dS/db for `S = span / (2^b - 1)`, evaluated at a continuous `b`.
pub fn act_step_bit_grad(span: f32, bits: f32) -> f32 {
    let p = (bits as f64).exp2();
    let d = p - 1.0;
    (-(span as f64) * p * std::f64::consts::LN_2 / (d * d)) as f32
}

/// dS/db for `S = 2u / (2^b - 2)`.
pub fn wgt_step_bit_grad(bound: f32, bits: f32) -> f32 {
    let p = (bits as f64).exp2();
    let d = p - 2.0;
    (-2.0 * bound as f64 * p * std::f64::consts::LN_2 / (d * d)) as f32
}

#[inline]
pub fn quantize_act_scalar(x: f32, q: ActQuant, bits: u32) -> f32 {
    let s = q.step(bits);
    let c = x.clamp(q.lower, q.upper);
    (((c - q.lower) / s).round() * s + q.lower).clamp(q.lower, q.upper)
}

#[inline]
pub fn quantize_wgt_scalar(w: f32, q: WgtQuant, bits: u32) -> f32 {
    let s = q.step(bits);
    let n = ((1u64 << (bits - 1)) - 1) as f32;
    let c = w.clamp(-q.bound, q.bound);
    (c / s).round().clamp(-n, n) * s
}

pub fn quantize_act(x: &Tensor, q: ActQuant, bits: BitValue) -> Result<Tensor> {
    q.check()?;
    let b = bits.effective();
    Ok(x.map(|v| quantize_act_scalar(v, q, b)))
}

pub fn quantize_wgt(w: &Tensor, q: WgtQuant, bits: BitValue) -> Result<Tensor> {
    q.check()?;
    let b = bits.effective();
    Ok(w.map(|v| quantize_wgt_scalar(v, q, b)))
}

/// Backward of [`quantize_act`]: returns (d_x, d_lower, d_upper, d_bits).
pub fn quantize_act_backward(
    x: &[f32],
    grad_out: &[f32],
    q: ActQuant,
    bits: u32,
) -> (Vec<f32>, f32, f32, f32) {
    let s = q.step(bits);
    let ds_db = act_step_bit_grad(q.upper - q.lower, bits as f32);
    let mut dx = Vec::with_capacity(x.len());
    let (mut dl, mut du, mut db) = (0.0f64, 0.0f64, 0.0f64);
    for (&v, &g) in x.iter().zip(grad_out) {
        if v < q.lower {
            dx.push(0.0);
            dl += g as f64;
        } else if v > q.upper {
            dx.push(0.0);
            du += g as f64;
        } else {
            dx.push(g);
            let t = (v - q.lower) / s;
            db += (g * (t.round() - t)) as f64;
        }
    }
    (dx, dl as f32, du as f32, (db * ds_db as f64) as f32)
}

/// Backward of [`quantize_wgt`]: returns (d_w, d_bound, d_bits).
///
/// Elements clipped to `-bound` contribute `-1` to the bound gradient, the
/// sign of the clipped value.
pub fn quantize_wgt_backward(
    w: &[f32],
    grad_out: &[f32],
    q: WgtQuant,
    bits: u32,
) -> (Vec<f32>, f32, f32) {
    let s = q.step(bits);
    let ds_db = wgt_step_bit_grad(q.bound, bits as f32);
    let mut dw = Vec::with_capacity(w.len());
    let (mut du, mut db) = (0.0f64, 0.0f64);
    for (&v, &g) in w.iter().zip(grad_out) {
        if v.abs() > q.bound {
            dw.push(0.0);
            du += (g * v.signum()) as f64;
        } else {
            dw.push(g);
            let t = v / s;
            db += (g * (t.round() - t)) as f64;
        }
    }
    (dw, du as f32, (db * ds_db as f64) as f32)
}

/// Which clipping parameter an STE probe differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteKind {
    ActLower,
    ActUpper,
    WgtBound,
}

/// Analytic STE gradient of a single element with respect to a clipping
/// parameter, next to the central finite difference of the round-free
/// surrogate (pure clipping). Parameters: activation range `[-1, 1]` or
/// weight bound `1`; `point` is the element value.
pub fn ste_grad_check(kind: SteKind, point: f32) -> (f32, f32) {
    let h = 1e-3f64;
    let p = point as f64;
    let clip = |x: f64, lo: f64, hi: f64| x.max(lo).min(hi);
    match kind {
        SteKind::ActLower => {
            let q = ActQuant {
                lower: -1.0,
                upper: 1.0,
            };
            let (_, dl, _, _) = quantize_act_backward(&[point], &[1.0], q, 8);
            let fd = (clip(p, -1.0 + h, 1.0) - clip(p, -1.0 - h, 1.0)) / (2.0 * h);
            (dl, fd as f32)
        }
        SteKind::ActUpper => {
            let q = ActQuant {
                lower: -1.0,
                upper: 1.0,
            };
            let (_, _, du, _) = quantize_act_backward(&[point], &[1.0], q, 8);
            let fd = (clip(p, -1.0, 1.0 + h) - clip(p, -1.0, 1.0 - h)) / (2.0 * h);
            (du, fd as f32)
        }
        SteKind::WgtBound => {
            let q = WgtQuant { bound: 1.0 };
            let (_, du, _) = quantize_wgt_backward(&[point], &[1.0], q, 8);
            let fd = (clip(p, -1.0 - h, 1.0 + h) - clip(p, -1.0 + h, 1.0 - h)) / (2.0 * h);
            (du, fd as f32)
        }
    }
}
