//! Image-to-bit and layer-to-bit mappings.
//!
//! An image's bit factor comes from thresholding its complexity score; a
//! layer's factor from thresholding its activation spread. Both sets of
//! thresholds are initialized from percentiles of calibration statistics.
//! The per-(image, layer) bit-width is `base + image factor + layer factor`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quantizer::{BitValue, BIT_MAX, BIT_MIN};

/// Nearest-rank percentile of an ascending slice: the element at 1-based
/// rank `ceil(p * n / 100)`, with rank clamped to `[1, n]`.
pub fn percentile_nearest_rank(sorted: &[f32], p: f64) -> f32 {
    let n = sorted.len();
    let rank = ((p * n as f64 / 100.0) - 1e-9).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

fn sorted_copy(values: &[f32]) -> Vec<f32> {
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    v
}

fn check_percent(op: &'static str, p: f64) -> Result<()> {
    if p > 0.0 && p <= 50.0 {
        Ok(())
    } else {
        Err(invalid(op, format!("percentile {p} outside (0, 50]")))
    }
}

fn threshold(value: f32, lower: f32, upper: f32, magnitude: u32) -> i32 {
    let m = magnitude as i32;
    if value < lower {
        -m
    } else if value > upper {
        m
    } else {
        0
    }
}

/// Complexity thresholds of the image-to-bit mapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct I2BMapper {
    pub lower: f32,
    pub upper: f32,
}

impl I2BMapper {
    /// Restore `lower <= upper` after an unconstrained update.
    pub fn project(&mut self) {
        self.lower = self.lower.min(self.upper);
    }

    pub fn midpoint(&self) -> f32 {
        0.5 * (self.lower + self.upper)
    }
}

/// Sensitivity thresholds and learnable per-layer bit factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2BMapper {
    pub lower: f32,
    pub upper: f32,
    pub factors: Vec<BitValue>,
}

impl L2BMapper {
    /// Effective integer factor of layer `k`.
    pub fn factor(&self, k: usize, magnitude: u32) -> i32 {
        let m = magnitude as f32;
        self.factors[k].cont.round().clamp(-m, m) as i32
    }

    /// Keep carriers within half a step of the admissible range so that
    /// rounding stays responsive to gradient updates.
    pub fn project(&mut self, magnitude: u32) {
        let lim = magnitude as f32 + 0.499;
        for f in &mut self.factors {
            f.cont = f.cont.clamp(-lim, lim);
        }
    }
}

pub fn init_i2b(complexities: &[f32], p_i: f64) -> Result<I2BMapper> {
    if complexities.is_empty() {
        return Err(Error::Empty("init_i2b"));
    }
    check_percent("init_i2b", p_i)?;
    let s = sorted_copy(complexities);
    Ok(I2BMapper {
        lower: percentile_nearest_rank(&s, p_i),
        upper: percentile_nearest_rank(&s, 100.0 - p_i),
    })
}

/// Image bit factor in `{-m, 0, +m}`; equality with a threshold maps to 0.
pub fn map_image(m: &I2BMapper, complexity: f32, magnitude: u32) -> i32 {
    threshold(complexity, m.lower, m.upper, magnitude)
}

pub fn init_l2b(sensitivity: &[f32], p_l: f64, magnitude: u32) -> Result<L2BMapper> {
    if sensitivity.is_empty() {
        return Err(Error::Empty("init_l2b"));
    }
    check_percent("init_l2b", p_l)?;
    let s = sorted_copy(sensitivity);
    let lower = percentile_nearest_rank(&s, p_l);
    let upper = percentile_nearest_rank(&s, 100.0 - p_l);
    let factors = sensitivity
        .iter()
        .map(|&v| BitValue::new(threshold(v, lower, upper, magnitude) as f32))
        .collect();
    Ok(L2BMapper {
        lower,
        upper,
        factors,
    })
}

/// Bit assignment for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitDecision {
    pub image_factor: i32,
    /// Effective bits per quantized layer.
    pub bits: Vec<u32>,
}

impl BitDecision {
    pub fn uniform(bits: u32, layers: usize) -> Self {
        BitDecision {
            image_factor: 0,
            bits: vec![bits; layers],
        }
    }

    pub fn mean_bits(&self) -> f64 {
        self.bits.iter().map(|&b| b as f64).sum::<f64>() / self.bits.len().max(1) as f64
    }
}

pub fn clamp_bits(b: i32) -> u32 {
    b.clamp(BIT_MIN as i32, BIT_MAX as i32) as u32
}

/// `clamp(base + image factor + layer factor)` for every layer.
pub fn compose_bits(base: u32, image_factor: i32, l2b: &L2BMapper, magnitude: u32) -> BitDecision {
    let bits = (0..l2b.factors.len())
        .map(|k| clamp_bits(base as i32 + image_factor + l2b.factor(k, magnitude)))
        .collect();
    BitDecision { image_factor, bits }
}

/// Derivative of the tanh surrogate `tanh(c - (u + l)/2)` with respect to
/// `(upper, lower)`. Both entries are equal.
pub fn i2b_surrogate_grad(m: &I2BMapper, complexity: f32) -> (f32, f32) {
    let t = ((complexity - m.midpoint()) as f64).tanh();
    let g = (-0.5 * (1.0 - t * t)) as f32;
    (g, g)
}

/// The two mapping modules together with the factor magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitMapper {
    pub i2b: I2BMapper,
    pub l2b: L2BMapper,
    pub magnitude: u32,
}

impl BitMapper {
    pub fn image_factor(&self, complexity: f32) -> i32 {
        map_image(&self.i2b, complexity, self.magnitude)
    }
}
