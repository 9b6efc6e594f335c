//! Independent f64 reference implementations shared by the integration
//! tests. Nothing here calls into the library's numeric kernels.

#![allow(dead_code)]

pub mod gradsuite;
pub mod pipesuite;
pub mod quantsuite;
pub mod sweepsuite;

use adabm_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense NCHW tensor in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct T64 {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl T64 {
    pub fn from_tensor(t: &Tensor) -> Self {
        T64 {
            shape: t.shape().0,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        T64 {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, h, w] = self.shape;
        ((n * cc + c) * h + y) * w + x
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        T64 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: [usize; 4], lo: f32, hi: f32) -> Tensor {
    let [n, c, h, w] = shape;
    let data = (0..n * c * h * w).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(Shape::new(n, c, h, w), data).unwrap()
}

/// Direct-loop zero-padded convolution.
pub fn conv(x: &T64, w: &T64, bias: Option<&[f64]>, stride: usize, pad: usize) -> T64 {
    let [n, cin, h, wd] = x.shape;
    let [cout, cin2, kh, kw] = w.shape;
    assert_eq!(cin, cin2);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = T64::zeros([n, cout, ho, wo]);
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bias.map_or(0.0, |bb| bb[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.data[x.idx(b, ci, iy as usize, ix as usize)]
                                    * w.data[w.idx(co, ci, ky, kx)];
                            }
                        }
                    }
                    let i = out.idx(b, co, oy, ox);
                    out.data[i] = s;
                }
            }
        }
    }
    out
}

/// Depth-to-space: output channel `c`, position `(y, x)` reads input
/// channel `c*s*s + (y%s)*s + x%s` at `(y/s, x/s)`.
pub fn pixel_shuffle(x: &T64, s: usize) -> T64 {
    let [n, c, h, w] = x.shape;
    let co = c / (s * s);
    let mut out = T64::zeros([n, co, h * s, w * s]);
    for b in 0..n {
        for ch in 0..co {
            for y in 0..h * s {
                for xx in 0..w * s {
                    let ic = ch * s * s + (y % s) * s + xx % s;
                    let i = out.idx(b, ch, y, xx);
                    out.data[i] = x.data[x.idx(b, ic, y / s, xx / s)];
                }
            }
        }
    }
    out
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn norm_dist(x: &[f64], t: &[f64]) -> f64 {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
    let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
    x.iter()
        .zip(t)
        .map(|(a, b)| (a / nx - b / nt).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Reference uniform quantizers written from the grid definitions.
pub fn ref_quant_act(x: f64, lower: f64, upper: f64, bits: u32) -> f64 {
    let levels = (2f64).powi(bits as i32) - 1.0;
    let s = (upper - lower) / levels;
    let c = x.max(lower).min(upper);
    let k = ((c - lower) / s).round();
    lower + k * s
}

pub fn ref_quant_wgt(w: f64, bound: f64, bits: u32) -> f64 {
    let s = 2.0 * bound / ((2f64).powi(bits as i32) - 2.0);
    let n = (2f64).powi(bits as i32 - 1) - 1.0;
    let c = w.max(-bound).min(bound);
    (c / s).round().max(-n).min(n) * s
}

/// Relative agreement with an absolute floor for exact zeros.
pub fn rel_close(analytic: f64, reference: f64, tol: f64) -> bool {
    let d = (analytic - reference).abs();
    d <= tol * analytic.abs().max(reference.abs()) || d <= 1e-9
}

/// Targets at distance 1 to 2 from `values` on a random side, so an L1 loss
/// against them is smooth near `values` with +-1 slopes.
pub fn signed_targets(r: &mut ChaCha8Rng, values: &Tensor) -> Tensor {
    let data = values
        .data()
        .iter()
        .map(|&v| {
            let off: f32 = r.random_range(1.0..2.0);
            if r.random_bool(0.5) {
                v - off
            } else {
                v + off
            }
        })
        .collect();
    Tensor::new(values.shape(), data).unwrap()
}
