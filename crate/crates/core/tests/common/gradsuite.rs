//! Analytic gradients against central finite differences of f64 reference
//! forwards. Primitives use relative tolerance 1e-4; surrogate rules
//! (straight-through quantizers, tanh thresholds, bits through the step
//! size) use 1e-3.

use super::*;
use adabm_core::bitmapping::{i2b_surrogate_grad, I2BMapper};
use adabm_core::quantizer::{ste_grad_check, SteKind};
use adabm_core::{GradTape, Result, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const PROBES: usize = 120;
const H: f64 = 1e-4;
const TOL_PRIMITIVE: f64 = 1e-4;
const TOL_SURROGATE: f64 = 1e-3;

/// f64 loss plus a signature of every piecewise region the forward passes
/// through; probes whose two evaluations disagree on it are discarded.
type Oracle<'a> = dyn Fn(&[T64]) -> (f64, Vec<i8>) + 'a;

fn analytic(
    params: &[Tensor],
    build: &dyn Fn(&mut GradTape, &[Var]) -> Result<Var>,
) -> Vec<Vec<f32>> {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    vars.iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect()
}

/// Runs `probes` informative probes; returns the failures.
fn probe(
    name: &str,
    params: &[Tensor],
    build: &dyn Fn(&mut GradTape, &[Var]) -> Result<Var>,
    oracle: &Oracle<'_>,
    probes: usize,
    tol: f64,
    r: &mut ChaCha8Rng,
) -> Vec<String> {
    let grads = analytic(params, build);
    let base: Vec<T64> = params.iter().map(T64::from_tensor).collect();
    let mut failures = Vec::new();
    let (mut done, mut attempts) = (0, 0);
    while done < probes {
        attempts += 1;
        assert!(
            attempts < probes * 20,
            "{name}: too many probes crossed a kink"
        );
        let p = r.random_range(0..params.len());
        let e = r.random_range(0..params[p].numel());
        let mut plus = base.clone();
        plus[p].data[e] += H;
        let mut minus = base.clone();
        minus[p].data[e] -= H;
        let (lp, sp) = oracle(&plus);
        let (lm, sm) = oracle(&minus);
        if sp != sm {
            continue;
        }
        let fd = (lp - lm) / (2.0 * H);
        let a = grads[p][e] as f64;
        if !rel_close(a, fd, tol) {
            failures.push(format!(
                "{name}: param {p} elem {e}: analytic {a:.8e} vs fd {fd:.8e}"
            ));
        }
        done += 1;
    }
    failures
}

/// Outcome of one family of probes.
#[derive(Debug, Default)]
pub struct Category {
    pub name: &'static str,
    pub probes: usize,
    pub failures: Vec<String>,
}

impl Category {
    fn new(name: &'static str) -> Self {
        Category {
            name,
            ..Default::default()
        }
    }

    fn add(&mut self, probes: usize, failures: Vec<String>) {
        self.probes += probes;
        self.failures.extend(failures);
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.probes >= 100
    }
}

fn sign_signature(v: &[f64]) -> Vec<i8> {
    v.iter().map(|&x| if x > 0.0 { 1 } else { -1 }).collect()
}

pub fn conv2d() -> Vec<Category> {
    let mut r = rng(11);
    let mut cat = Category::new("conv2d");
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let x = random_tensor(&mut r, [2, 3, 7, 7], -1.0, 1.0);
        let w = random_tensor(&mut r, [4, 3, 3, 3], -0.5, 0.5);
        let b = random_tensor(&mut r, [1, 4, 1, 1], -0.2, 0.2);
        let y = adabm_core::tensor::conv2d(&x, &w, Some(b.data()), stride, pad).unwrap();
        let t = signed_targets(&mut r, &y);
        let t64 = T64::from_tensor(&t);
        let build = |tape: &mut GradTape, v: &[Var]| {
            let y = tape.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            tape.l1_distance(y, &t)
        };
        let oracle = |p: &[T64]| {
            let y = conv(&p[0], &p[1], Some(&p[2].data), stride, pad);
            let d: Vec<f64> = y.data.iter().zip(&t64.data).map(|(a, b)| a - b).collect();
            (l1(&y.data, &t64.data), sign_signature(&d))
        };
        cat.add(
            PROBES,
            probe(
                &format!("conv s{stride} p{pad}"),
                &[x, w, b],
                &build,
                &oracle,
                PROBES,
                TOL_PRIMITIVE,
                &mut r,
            ),
        );
    }
    vec![cat]
}

pub fn relu_add_shuffle() -> Vec<Category> {
    let mut r = rng(12);
    let away_from_zero = |r: &mut ChaCha8Rng, shape: [usize; 4]| {
        let t = random_tensor(r, shape, 0.05, 1.0);
        let data: Vec<f32> = t
            .data()
            .iter()
            .map(|&v| if r.random_bool(0.5) { v } else { -v })
            .collect();
        Tensor::new(t.shape(), data).unwrap()
    };
    let mut cats = Vec::new();

    let x = away_from_zero(&mut r, [1, 3, 6, 6]);
    let t = signed_targets(&mut r, &adabm_core::tensor::relu(&x));
    let t64 = T64::from_tensor(&t);
    let build = |tape: &mut GradTape, v: &[Var]| {
        let y = tape.relu(v[0]);
        tape.l1_distance(y, &t)
    };
    let oracle = |p: &[T64]| {
        let y: Vec<f64> = p[0].data.iter().map(|&v| v.max(0.0)).collect();
        let mut sig = sign_signature(&p[0].data);
        let d: Vec<f64> = y.iter().zip(&t64.data).map(|(a, b)| a - b).collect();
        sig.extend(sign_signature(&d));
        (l1(&y, &t64.data), sig)
    };
    let mut cat = Category::new("relu");
    cat.add(
        PROBES,
        probe("relu", &[x], &build, &oracle, PROBES, TOL_PRIMITIVE, &mut r),
    );
    cats.push(cat);

    let a = random_tensor(&mut r, [1, 2, 5, 5], -1.0, 1.0);
    let b = random_tensor(&mut r, [1, 2, 5, 5], -1.0, 1.0);
    let t = signed_targets(&mut r, &adabm_core::tensor::add(&a, &b).unwrap());
    let t64 = T64::from_tensor(&t);
    let build = |tape: &mut GradTape, v: &[Var]| {
        let y = tape.add(v[0], v[1])?;
        tape.l1_distance(y, &t)
    };
    let oracle = |p: &[T64]| {
        let y: Vec<f64> = p[0]
            .data
            .iter()
            .zip(&p[1].data)
            .map(|(x, y)| x + y)
            .collect();
        let d: Vec<f64> = y.iter().zip(&t64.data).map(|(a, b)| a - b).collect();
        (l1(&y, &t64.data), sign_signature(&d))
    };
    let mut cat = Category::new("add");
    cat.add(
        PROBES,
        probe(
            "add",
            &[a, b],
            &build,
            &oracle,
            PROBES,
            TOL_PRIMITIVE,
            &mut r,
        ),
    );
    cats.push(cat);

    let x = random_tensor(&mut r, [2, 8, 3, 4], -1.0, 1.0);
    let t = signed_targets(&mut r, &adabm_core::tensor::pixel_shuffle(&x, 2).unwrap());
    let t64 = T64::from_tensor(&t);
    let build = |tape: &mut GradTape, v: &[Var]| {
        let y = tape.pixel_shuffle(v[0], 2)?;
        tape.l1_distance(y, &t)
    };
    let oracle = |p: &[T64]| {
        let y = pixel_shuffle(&p[0], 2);
        let d: Vec<f64> = y.data.iter().zip(&t64.data).map(|(a, b)| a - b).collect();
        (l1(&y.data, &t64.data), sign_signature(&d))
    };
    let mut cat = Category::new("pixel_shuffle");
    cat.add(
        PROBES,
        probe(
            "pixel_shuffle",
            &[x],
            &build,
            &oracle,
            PROBES,
            TOL_PRIMITIVE,
            &mut r,
        ),
    );
    cats.push(cat);
    cats
}

pub fn distances() -> Vec<Category> {
    let mut r = rng(13);
    let x = random_tensor(&mut r, [1, 4, 5, 5], -1.0, 1.0);
    let t = random_tensor(&mut r, [1, 4, 5, 5], -1.0, 1.0);
    let t64 = T64::from_tensor(&t);
    let build = |tape: &mut GradTape, v: &[Var]| tape.normalized_l2_distance(v[0], &t);
    let oracle = |p: &[T64]| (norm_dist(&p[0].data, &t64.data), Vec::new());
    let mut skt = Category::new("normalized_l2");
    skt.add(
        PROBES,
        probe(
            "normalized_l2",
            std::slice::from_ref(&x),
            &build,
            &oracle,
            PROBES,
            TOL_PRIMITIVE,
            &mut r,
        ),
    );

    let build = |tape: &mut GradTape, v: &[Var]| {
        let s = tape.scale(v[0], -2.5);
        Ok(tape.sum(s))
    };
    let oracle = |p: &[T64]| (p[0].data.iter().map(|v| -2.5 * v).sum(), Vec::new());
    let mut red = Category::new("scale_sum");
    red.add(
        PROBES,
        probe(
            "scale_sum",
            &[x],
            &build,
            &oracle,
            PROBES,
            TOL_PRIMITIVE,
            &mut r,
        ),
    );
    vec![skt, red]
}

pub fn clipping_ste() -> Vec<Category> {
    let mut r = rng(14);
    let mut cats = Vec::new();
    for (kind, name) in [
        (SteKind::ActLower, "ste act lower"),
        (SteKind::ActUpper, "ste act upper"),
        (SteKind::WgtBound, "ste weight bound"),
    ] {
        let mut cat = Category::new(name);
        let mut done = 0;
        while done < PROBES {
            let p: f32 = r.random_range(-2.0..2.0);
            // the surrogate is not differentiable at the clipping bounds
            if (p.abs() - 1.0).abs() < 0.01 {
                continue;
            }
            let (a, fd) = ste_grad_check(kind, p);
            if !rel_close(a as f64, fd as f64, TOL_PRIMITIVE) {
                cat.failures
                    .push(format!("{kind:?} at {p}: analytic {a} vs fd {fd}"));
            }
            done += 1;
        }
        cat.probes = done;
        cats.push(cat);
    }
    cats
}

pub fn image_threshold() -> Vec<Category> {
    let mut r = rng(15);
    let mut cat = Category::new("image threshold tanh");
    for _ in 0..PROBES {
        let l: f32 = r.random_range(0.0..0.5);
        let u: f32 = l + r.random_range(0.0..0.5);
        let c: f32 = r.random_range(-1.0..1.5);
        let (du, dl) = i2b_surrogate_grad(&I2BMapper { lower: l, upper: u }, c);
        let f = |u: f64, l: f64| (c as f64 - 0.5 * (u + l)).tanh();
        let (uf, lf) = (u as f64, l as f64);
        let fdu = (f(uf + H, lf) - f(uf - H, lf)) / (2.0 * H);
        let fdl = (f(uf, lf + H) - f(uf, lf - H)) / (2.0 * H);
        if !rel_close(du as f64, fdu, TOL_SURROGATE) || !rel_close(dl as f64, fdl, TOL_SURROGATE) {
            cat.failures
                .push(format!("c={c} l={l} u={u}: ({du}, {dl}) vs ({fdu}, {fdl})"));
        }
        cat.probes += 1;
    }
    vec![cat]
}

/// Surrogate of a fake quantizer: clipping plus a fixed per-element offset
/// whose size follows the step size as the bit-width varies. Rounding of
/// both the levels and the bit-width is treated as identity.
struct FrozenQuant {
    offset: Vec<f64>,
    bits0: f64,
    bits_eff: f64,
    weights: bool,
}

impl FrozenQuant {
    fn from_tape(
        tape: &GradTape,
        input: Var,
        output: Var,
        lower: f64,
        upper: f64,
        bits0: f32,
        weights: bool,
    ) -> Self {
        let offset = tape
            .value(input)
            .data()
            .iter()
            .zip(tape.value(output).data())
            .map(|(&x, &q)| q as f64 - (x as f64).max(lower).min(upper))
            .collect();
        FrozenQuant {
            offset,
            bits0: bits0 as f64,
            bits_eff: (bits0 as f64).round(),
            weights,
        }
    }

    fn step_ratio(&self, bits: f64) -> f64 {
        let b = self.bits_eff + (bits - self.bits0);
        let k = if self.weights { 2.0 } else { 1.0 };
        (self.bits_eff.exp2() - k) / (b.exp2() - k)
    }

    /// Forward plus the clip region of every element.
    fn apply(&self, x: &T64, lower: f64, upper: f64, bits: f64, sig: &mut Vec<i8>) -> T64 {
        let ratio = self.step_ratio(bits);
        let data = x
            .data
            .iter()
            .zip(&self.offset)
            .map(|(&v, &o)| {
                sig.push(if v < lower {
                    -1
                } else if v > upper {
                    1
                } else {
                    0
                });
                v.max(lower).min(upper) + o * ratio
            })
            .collect();
        T64 {
            shape: x.shape,
            data,
        }
    }
}

pub fn quantizer_surrogates() -> Vec<Category> {
    let mut r = rng(16);
    let mut cats = Vec::new();
    for weights in [false, true] {
        let mut cat = Category::new(if weights {
            "weight quantizer"
        } else {
            "activation quantizer"
        });
        for trial in 0..4 {
            let x = random_tensor(&mut r, [1, 2, 6, 6], -1.2, 1.2);
            let bits0: f32 = [2.8f32, 4.2, 5.9, 7.3][trial];
            let (lo, hi) = if weights {
                (-0.9f32, 0.9f32)
            } else {
                (-0.8f32, 1.0f32)
            };
            let mut tape = GradTape::new();
            let xv = tape.leaf(x.clone(), true);
            let lv = tape.scalar(lo, true);
            let uv = tape.scalar(hi, true);
            let bv = tape.scalar(bits0, true);
            let q = if weights {
                tape.quantize_wgt(xv, uv, bv).unwrap()
            } else {
                tape.quantize_act(xv, lv, uv, bv).unwrap()
            };
            let t = signed_targets(&mut r, tape.value(q));
            let frozen = FrozenQuant::from_tape(&tape, xv, q, lo as f64, hi as f64, bits0, weights);
            let t64 = T64::from_tensor(&t);
            let build = |tape: &mut GradTape, v: &[Var]| {
                let q = if weights {
                    tape.quantize_wgt(v[0], v[2], v[3])?
                } else {
                    tape.quantize_act(v[0], v[1], v[2], v[3])?
                };
                tape.l1_distance(q, &t)
            };
            let oracle = |p: &[T64]| {
                let mut sig = Vec::new();
                let (l, u) = if weights {
                    (-p[2].data[0], p[2].data[0])
                } else {
                    (p[1].data[0], p[2].data[0])
                };
                let y = frozen.apply(&p[0], l, u, p[3].data[0], &mut sig);
                (l1(&y.data, &t64.data), sig)
            };
            let params = [
                x,
                Tensor::scalar(lo),
                Tensor::scalar(hi),
                Tensor::scalar(bits0),
            ];
            cat.add(
                PROBES / 4,
                probe(
                    &format!("quantizer weights={weights} b={bits0}"),
                    &params,
                    &build,
                    &oracle,
                    PROBES / 4,
                    TOL_SURROGATE,
                    &mut r,
                ),
            );
            // the bit-width itself gets dedicated probes
            let grads = analytic(&params, &build);
            let base: Vec<T64> = params.iter().map(T64::from_tensor).collect();
            let mut plus = base.clone();
            plus[3].data[0] += H;
            let mut minus = base.clone();
            minus[3].data[0] -= H;
            let fd = (oracle(&plus).0 - oracle(&minus).0) / (2.0 * H);
            let a = grads[3][0] as f64;
            if !rel_close(a, fd, TOL_SURROGATE) {
                cat.failures
                    .push(format!("bits weights={weights} b={bits0}: {a} vs {fd}"));
            }
            if a == 0.0 {
                cat.failures
                    .push(format!("bit gradient vanished at b={bits0}"));
            }
            cat.probes += 1;
        }
        cats.push(cat);
    }
    cats
}

/// Two quantized conv layers with a ReLU, an L1 output loss and a
/// normalized feature distance on the hidden activation.
pub fn mini_network() -> Vec<Category> {
    let mut r = rng(17);
    let mut cat = Category::new("two-layer quantized network");
    for _net in 0..4 {
        let x = random_tensor(&mut r, [1, 2, 5, 5], -1.0, 1.0);
        let w1 = random_tensor(&mut r, [3, 2, 3, 3], -0.5, 0.5);
        let b1 = random_tensor(&mut r, [1, 3, 1, 1], -0.1, 0.1);
        let w2 = random_tensor(&mut r, [2, 3, 3, 3], -0.5, 0.5);
        let b2 = random_tensor(&mut r, [1, 2, 1, 1], -0.1, 0.1);
        let scalars: Vec<f32> = vec![
            r.random_range(-0.8..-0.6), // l1
            r.random_range(0.6..0.8),   // u1
            r.random_range(-0.1..0.05), // l2
            r.random_range(0.6..1.0),   // u2
            r.random_range(0.35..0.45), // weight bound 1
            r.random_range(0.3..0.4),   // weight bound 2
            4.2,                        // act bits 1
            3.7,                        // act bits 2
            4.1,                        // weight bits 1
            5.3,                        // weight bits 2
        ];
        let mut params = vec![x, w1, b1, w2, b2];
        params.extend(scalars.iter().map(|&s| Tensor::scalar(s)));

        let forward = |tape: &mut GradTape, v: &[Var]| -> Result<[Var; 7]> {
            let xa = tape.quantize_act(v[0], v[5], v[6], v[11])?;
            let wq1 = tape.quantize_wgt(v[1], v[9], v[13])?;
            let y1 = tape.conv2d(xa, wq1, Some(v[2]), 1, 1)?;
            let h = tape.relu(y1);
            let ha = tape.quantize_act(h, v[7], v[8], v[12])?;
            let wq2 = tape.quantize_wgt(v[3], v[10], v[14])?;
            let y2 = tape.conv2d(ha, wq2, Some(v[4]), 1, 1)?;
            Ok([xa, wq1, y1, h, ha, wq2, y2])
        };
        let mut tape = GradTape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let [xa, wq1, _, h, ha, wq2, y2] = forward(&mut tape, &vars).unwrap();
        let s = |i: usize| scalars[i] as f64;
        let fq_x = FrozenQuant::from_tape(&tape, vars[0], xa, s(0), s(1), scalars[6], false);
        let fq_w1 = FrozenQuant::from_tape(&tape, vars[1], wq1, -s(4), s(4), scalars[8], true);
        let fq_h = FrozenQuant::from_tape(&tape, h, ha, s(2), s(3), scalars[7], false);
        let fq_w2 = FrozenQuant::from_tape(&tape, vars[3], wq2, -s(5), s(5), scalars[9], true);
        let target = signed_targets(&mut r, tape.value(y2));
        let feat_target = random_tensor(&mut r, tape.value(h).shape().0, 0.0, 1.0);
        let (t64, f64t) = (T64::from_tensor(&target), T64::from_tensor(&feat_target));

        let build = |tape: &mut GradTape, v: &[Var]| {
            let [_, _, _, h, _, _, y2] = forward(tape, v)?;
            let pix = tape.l1_distance(y2, &target)?;
            let skt = tape.normalized_l2_distance(h, &feat_target)?;
            let skt = tape.scale(skt, 0.5);
            tape.add(pix, skt)
        };
        let oracle = |p: &[T64]| {
            let sc = |i: usize| p[5 + i].data[0];
            let mut sig = Vec::new();
            let xa = fq_x.apply(&p[0], sc(0), sc(1), sc(6), &mut sig);
            let wq1 = fq_w1.apply(&p[1], -sc(4), sc(4), sc(8), &mut sig);
            let y1 = conv(&xa, &wq1, Some(&p[2].data), 1, 1);
            sig.extend(sign_signature(&y1.data));
            let h = y1.map(|v| v.max(0.0));
            let ha = fq_h.apply(&h, sc(2), sc(3), sc(7), &mut sig);
            let wq2 = fq_w2.apply(&p[3], -sc(5), sc(5), sc(9), &mut sig);
            let y2 = conv(&ha, &wq2, Some(&p[4].data), 1, 1);
            let d: Vec<f64> = y2.data.iter().zip(&t64.data).map(|(a, b)| a - b).collect();
            sig.extend(sign_signature(&d));
            let loss = l1(&y2.data, &t64.data) + 0.5 * norm_dist(&h.data, &f64t.data);
            (loss, sig)
        };
        cat.add(
            60,
            probe(
                "mini-net",
                &params,
                &build,
                &oracle,
                60,
                TOL_SURROGATE,
                &mut r,
            ),
        );
    }
    vec![cat]
}

/// Every family, in a fixed order.
pub fn all() -> Vec<Category> {
    let mut v = conv2d();
    v.extend(relu_add_shuffle());
    v.extend(distances());
    v.extend(clipping_ste());
    v.extend(image_threshold());
    v.extend(quantizer_surrogates());
    v.extend(mini_network());
    v
}
