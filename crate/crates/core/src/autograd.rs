//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value. `backward` walks
//! the nodes in reverse recording order and accumulates gradients into the
//! `grad` slot of each node that requires one.

use crate::error::{Error, Result};
use crate::quantizer::{self, effective_bits, ActQuant, WgtQuant};
use crate::tensor::{self, Shape, Tensor};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Add(Var, Var),
    PixelShuffle(Var, usize),
    QuantAct {
        x: Var,
        lower: Var,
        upper: Var,
        bits: Var,
    },
    QuantWgt {
        w: Var,
        bound: Var,
        bits: Var,
    },
    Sum(Var),
    Scale(Var, f32),
    L1Dist {
        x: Var,
        target: Tensor,
    },
    NormDist {
        x: Var,
        target: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Lower bound applied to feature norms before normalization.
pub const NORM_EPS: f32 = 1e-8;

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last `backward`, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Scalar gradient of a 1-element variable; zero if none arrived.
    pub fn grad_scalar(&self, v: Var) -> f32 {
        self.grad(v).map_or(0.0, |g| g[0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn scalar(&mut self, value: f32, requires_grad: bool) -> Var {
        self.leaf(Tensor::scalar(value), requires_grad)
    }

    /// Convolution; `b` is a 1xCoutx1x1 bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data());
        let out = tensor::conv2d(self.value(x), self.value(w), bias, stride, pad)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn pixel_shuffle(&mut self, x: Var, scale: usize) -> Result<Var> {
        let out = tensor::pixel_shuffle(self.value(x), scale)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::PixelShuffle(x, scale), rg))
    }

    /// Asymmetric fake quantization; `lower`, `upper` and `bits` are scalar
    /// variables. `bits` is rounded and clamped in the forward pass.
    pub fn quantize_act(&mut self, x: Var, lower: Var, upper: Var, bits: Var) -> Result<Var> {
        let q = ActQuant {
            lower: self.value(lower).item(),
            upper: self.value(upper).item(),
        };
        let b = quantizer::BitValue::new(self.value(bits).item());
        let out = quantizer::quantize_act(self.value(x), q, b)?;
        let rg = self.rg(&[x, lower, upper, bits]);
        Ok(self.push(
            out,
            Op::QuantAct {
                x,
                lower,
                upper,
                bits,
            },
            rg,
        ))
    }

    /// Symmetric fake quantization of a weight tensor.
    pub fn quantize_wgt(&mut self, w: Var, bound: Var, bits: Var) -> Result<Var> {
        let q = WgtQuant {
            bound: self.value(bound).item(),
        };
        let b = quantizer::BitValue::new(self.value(bits).item());
        let out = quantizer::quantize_wgt(self.value(w), q, b)?;
        let rg = self.rg(&[w, bound, bits]);
        Ok(self.push(out, Op::QuantWgt { w, bound, bits }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let out = self.value(x).map(|v| v * k);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, k), rg)
    }

    /// `sum |x - target|` against a constant target.
    pub fn l1_distance(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "l1_distance",
                lhs: xv.shape(),
                rhs: target.shape(),
            });
        }
        let s: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(s as f32),
            Op::L1Dist {
                x,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// `|| x/||x|| - t/||t|| ||_2` against a constant target, each norm
    /// floored at [`NORM_EPS`].
    pub fn normalized_l2_distance(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "normalized_l2_distance",
                lhs: xv.shape(),
                rhs: target.shape(),
            });
        }
        let d = normalized_distance(xv.data(), target.data());
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(d as f32),
            Op::NormDist {
                x,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Gradients from earlier passes are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let ls = self.value(loss).shape();
        if ls != Shape::scalar() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: ls,
                rhs: Shape::scalar(),
            });
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.grad.take() else {
                continue;
            };
            self.backward_node(i, &g)?;
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f32>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.value.grad.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => node.value.grad = Some(g),
        }
    }

    fn accumulate_scalar(&mut self, v: Var, g: f32) {
        self.accumulate(v, vec![g]);
    }

    fn backward_node(&mut self, i: usize, g: &[f32]) -> Result<()> {
        // Borrow the op by swapping it out; restored at the end.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let need = [
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    b.is_some_and(|b| self.requires_grad(b)),
                ];
                let (dx, dw, db) = tensor::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    need,
                )?;
                if let Some(dx) = dx {
                    self.accumulate(*x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(*b, db);
                }
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.to_vec());
            }
            Op::PixelShuffle(x, r) => {
                let dx = tensor::pixel_shuffle_backward(self.value(*x).shape(), *r, g)?;
                self.accumulate(*x, dx);
            }
            Op::QuantAct {
                x,
                lower,
                upper,
                bits,
            } => {
                let q = ActQuant {
                    lower: self.value(*lower).item(),
                    upper: self.value(*upper).item(),
                };
                let b = effective_bits(self.value(*bits).item());
                let (dx, dl, du, db) =
                    quantizer::quantize_act_backward(self.value(*x).data(), g, q, b);
                self.accumulate(*x, dx);
                self.accumulate_scalar(*lower, dl);
                self.accumulate_scalar(*upper, du);
                self.accumulate_scalar(*bits, db);
            }
            Op::QuantWgt { w, bound, bits } => {
                let q = WgtQuant {
                    bound: self.value(*bound).item(),
                };
                let b = effective_bits(self.value(*bits).item());
                let (dw, du, db) = quantizer::quantize_wgt_backward(self.value(*w).data(), g, q, b);
                self.accumulate(*w, dw);
                self.accumulate_scalar(*bound, du);
                self.accumulate_scalar(*bits, db);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(*x, vec![g[0]; n]);
            }
            Op::Scale(x, k) => {
                self.accumulate(*x, g.iter().map(|v| v * k).collect());
            }
            Op::L1Dist { x, target } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| {
                        let d = a - b;
                        if d > 0.0 {
                            g[0]
                        } else if d < 0.0 {
                            -g[0]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::NormDist { x, target } => {
                let dx = normalized_distance_grad(self.value(*x).data(), target.data(), g[0]);
                self.accumulate(*x, dx);
            }
        }
        self.nodes[i].op = op;
        Ok(())
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn normalized_distance(x: &[f32], t: &[f32]) -> f64 {
    let nx = norm(x).max(NORM_EPS as f64);
    let nt = norm(t).max(NORM_EPS as f64);
    x.iter()
        .zip(t)
        .map(|(&a, &b)| {
            let d = a as f64 / nx - b as f64 / nt;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn normalized_distance_grad(x: &[f32], t: &[f32], g: f32) -> Vec<f32> {
    let raw = norm(x);
    let nx = raw.max(NORM_EPS as f64);
    let nt = norm(t).max(NORM_EPS as f64);
    let d = normalized_distance(x, t);
    if d == 0.0 {
        return vec![0.0; x.len()];
    }
    // e = (x̂ - t̂)/d; dx = (e - x̂ (x̂·e)) / ||x|| when the norm is not floored.
    let e: Vec<f64> = x
        .iter()
        .zip(t)
        .map(|(&a, &b)| (a as f64 / nx - b as f64 / nt) / d)
        .collect();
    let floored = raw < NORM_EPS as f64;
    let proj: f64 = if floored {
        0.0
    } else {
        x.iter().zip(&e).map(|(&a, &ei)| a as f64 / nx * ei).sum()
    };
    x.iter()
        .zip(&e)
        .map(|(&a, &ei)| ((ei - a as f64 / nx * proj) / nx * g as f64) as f32)
        .collect()
}
