//! The clipping-range sweeps against straightforward loop implementations
//! written from their definitions. Shared by the sweep tests and the
//! acceptance run.

use super::rng;
use adabm_core::calibration::{bit_aware_clip, omse_weight_range};
use adabm_core::quantizer::BitValue;
use adabm_core::{Shape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal, StudentT};

pub const TENSORS: usize = 50;
pub const BITS: [u32; 4] = [2, 4, 6, 8];

fn naive_act(x: f32, l: f32, u: f32, bits: u32) -> f32 {
    let steps = (2u32.pow(bits) - 1) as f32;
    let s = (u - l) / steps;
    let c = if x < l {
        l
    } else if x > u {
        u
    } else {
        x
    };
    let k = ((c - l) / s).round();
    (k * s + l).max(l).min(u)
}

fn naive_wgt(w: f32, bound: f32, bits: u32) -> f32 {
    let s = 2.0 * bound / (2u32.pow(bits) - 2) as f32;
    let n = (2u32.pow(bits - 1) - 1) as f32;
    let c = if w < -bound {
        -bound
    } else if w > bound {
        bound
    } else {
        w
    };
    let k = (c / s).round();
    k.max(-n).min(n) * s
}

/// Candidate factors 0.01 ..= 1.00 visited in increasing order; `<=` keeps
/// the largest among equal errors.
fn naive_clip(samples: &[f32], l: f32, u: f32, bits: u32) -> f32 {
    let mut best = (f64::INFINITY, 0.0f32);
    for k in 1..=100 {
        let eps = k as f32 / 100.0;
        let mut err = 0.0f64;
        for &x in samples {
            let d = (x - naive_act(x, eps * l, eps * u, bits)) as f64;
            err += d * d;
        }
        if err <= best.0 {
            best = (err, eps);
        }
    }
    best.1
}

fn naive_omse(w: &[f32], bits: u32) -> f32 {
    let mut amax = 0.0f32;
    for &v in w {
        if v.abs() > amax {
            amax = v.abs();
        }
    }
    let mut best = (f64::INFINITY, 0.0f32);
    for k in 1..=100 {
        let bound = amax * k as f32 / 100.0;
        let mut err = 0.0f64;
        for &v in w {
            let d = (v - naive_wgt(v, bound, bits)) as f64;
            err += d * d;
        }
        if err <= best.0 {
            best = (err, bound);
        }
    }
    best.1
}

/// Normal samples, some with heavy-tailed outliers mixed in.
fn samples(r: &mut rand_chacha::ChaCha8Rng, i: usize) -> Vec<f32> {
    let n = r.random_range(500..3000);
    let mean: f32 = r.random_range(-1.0..1.0);
    let std: f32 = r.random_range(0.05..3.0);
    let normal = Normal::new(mean, std).unwrap();
    let heavy = StudentT::new(2.0f32).unwrap();
    (0..n)
        .map(|_| {
            if i % 5 == 4 && r.random_bool(0.02) {
                mean + std * heavy.sample(r)
            } else {
                normal.sample(r)
            }
        })
        .collect()
}

fn min_max(v: &[f32]) -> (f32, f32) {
    v.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        })
}

/// Compares both sweeps with the loop versions on random tensors; returns
/// the number of exact matches checked.
pub fn exact_matches() -> Result<usize, String> {
    let mut r = rng(31);
    let mut checked = 0;
    for i in 0..TENSORS {
        let s = samples(&mut r, i);
        let (l, u) = min_max(&s);
        let w = Tensor::new(Shape::new(1, 1, 1, s.len()), s.clone()).unwrap();
        for bits in BITS {
            let got = bit_aware_clip(&s, l, u, BitValue::fixed(bits)).map_err(|e| e.to_string())?;
            let want = naive_clip(&s, l, u, bits);
            if got != want {
                return Err(format!("clip tensor {i} bits {bits}: {got} vs {want}"));
            }
            let got = omse_weight_range(&w, BitValue::fixed(bits)).map_err(|e| e.to_string())?;
            let want = naive_omse(&s, bits);
            if got != want {
                return Err(format!(
                    "weight range tensor {i} bits {bits}: {got} vs {want}"
                ));
            }
            checked += 2;
        }
    }
    Ok(checked)
}

/// Fraction of Gaussian trials where 8 bits keep at least the 2-bit range,
/// for activations and weights.
pub fn finer_grids_clip_less(trials: usize) -> (f64, f64) {
    let mut r = rng(33);
    let (mut act_ok, mut wgt_ok) = (0, 0);
    for _ in 0..trials {
        let std: f32 = r.random_range(0.1..2.0);
        let normal = Normal::new(0.0f32, std).unwrap();
        let s: Vec<f32> = (0..2000).map(|_| normal.sample(&mut r)).collect();
        let (l, u) = min_max(&s);
        let e8 = bit_aware_clip(&s, l, u, BitValue::fixed(8)).unwrap();
        let e2 = bit_aware_clip(&s, l, u, BitValue::fixed(2)).unwrap();
        act_ok += (e8 >= e2) as usize;
        let w = Tensor::new(Shape::new(1, 1, 1, s.len()), s).unwrap();
        let b8 = omse_weight_range(&w, BitValue::fixed(8)).unwrap();
        let b2 = omse_weight_range(&w, BitValue::fixed(2)).unwrap();
        wgt_ok += (b8 >= b2) as usize;
    }
    (act_ok as f64 / trials as f64, wgt_ok as f64 / trials as f64)
}
