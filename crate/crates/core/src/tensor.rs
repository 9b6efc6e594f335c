//! Dense NCHW tensors and the forward/backward kernels of the operators the
//! SR network uses.

use std::fmt;

use crate::error::{invalid, Error, Result};
use crate::parallel;

/// (N, C, H, W) extent of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    /// Elements in one batch item.
    pub fn item_len(&self) -> usize {
        self.0[1] * self.0[2] * self.0[3]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "{n}x{c}x{h}x{w}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(invalid(
                "Tensor::new",
                format!("{} elements for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Build a 1x1x1xL row tensor.
    pub fn from_slice(values: &[f32]) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, values.len()),
            data: values.to_vec(),
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        let [_, cc, hh, ww] = self.shape.0;
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    /// Batch item `n` as its own 1xCxHxW tensor.
    pub fn item_tensor(&self, n: usize) -> Tensor {
        let len = self.shape.item_len();
        let [_, c, h, w] = self.shape.0;
        Tensor {
            shape: Shape::new(1, c, h, w),
            data: self.data[n * len..(n + 1) * len].to_vec(),
            grad: None,
        }
    }

    /// Concatenate equally shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(Error::Empty("Tensor::stack"))?;
        let [_, c, h, w] = first.shape.0;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            let [tn, tc, th, tw] = t.shape.0;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape,
                    rhs: t.shape,
                });
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(Shape::new(n, c, h, w), data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
            grad: None,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape,
            rhs: b.shape,
        });
    }
    Ok(())
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, weight: Shape, stride: usize, pad: usize) -> Result<Self> {
        let [cout, cin, kh, kw] = weight.0;
        if input.c() != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input,
                rhs: weight,
            });
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be at least 1"));
        }
        let (h, w) = (input.h(), input.w());
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input,
                rhs: weight,
            });
        }
        Ok(ConvGeom {
            cin,
            cout,
            kh,
            kw,
            h,
            w,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfold one image (CxHxW) into a (C*kh*kw) x (Ho*Wo) column matrix.
    fn im2col(&self, img: &[f32]) -> Vec<f32> {
        let np = self.out_pixels();
        let mut cols = vec![0.0f32; self.patch_len() * np];
        for c in 0..self.cin {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * np..(row + 1) * np];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Fold a column matrix back onto an image, accumulating overlaps.
    fn col2im(&self, cols: &[f32], img: &mut [f32]) {
        let np = self.out_pixels();
        for c in 0..self.cin {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * np..(row + 1) * np];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major matrix view: (data, row stride, column stride).
type MatRef<'a> = (&'a [f32], isize, isize);

/// c = a(m x k) * b(k x n) + beta * c, with c row-major m x n.
fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f32, c: &mut [f32]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every stride/extent pair addresses memory inside the slices
    // checked by the callers (a: m*k, b: k*n, c: m*n elements).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D convolution with zero padding. `bias`, if given, has one entry per
/// output channel.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape, weight.shape, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(invalid(
                "conv2d",
                format!(
                    "bias has {} entries for {} output channels",
                    b.len(),
                    g.cout
                ),
            ));
        }
    }
    let n = input.shape.n();
    let in_len = input.shape.item_len();
    let np = g.out_pixels();
    let k = g.patch_len();
    let outs = parallel::map_range(n, |i| {
        let cols = g.im2col(&input.data[i * in_len..(i + 1) * in_len]);
        let mut out = vec![0.0f32; g.cout * np];
        if let Some(b) = bias {
            for (co, chunk) in out.chunks_mut(np).enumerate() {
                chunk.fill(b[co]);
            }
        }
        gemm(
            g.cout,
            k,
            np,
            (&weight.data, k as isize, 1),
            (&cols, np as isize, 1),
            if bias.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        out
    });
    Tensor::new(Shape::new(n, g.cout, g.ho, g.wo), outs.concat())
}

/// Input, weight and bias gradients, each present when requested.
pub type ConvGrads = (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>);

/// Gradients of a convolution given the upstream gradient of its output.
/// Returns (d_input, d_weight, d_bias); each is computed only when requested.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f32],
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> Result<ConvGrads> {
    let g = ConvGeom::new(input.shape, weight.shape, stride, pad)?;
    let n = input.shape.n();
    let in_len = input.shape.item_len();
    let np = g.out_pixels();
    let k = g.patch_len();
    let [need_x, need_w, need_b] = need;

    let per_item = parallel::map_range(n, |i| {
        let go = &grad_out[i * g.cout * np..(i + 1) * g.cout * np];
        let dx = need_x.then(|| {
            let mut dcols = vec![0.0f32; k * np];
            // weight^T (k x cout) * go (cout x np)
            gemm(
                k,
                g.cout,
                np,
                (&weight.data, 1, k as isize),
                (go, np as isize, 1),
                0.0,
                &mut dcols,
            );
            let mut dx = vec![0.0f32; in_len];
            g.col2im(&dcols, &mut dx);
            dx
        });
        let dw = need_w.then(|| {
            let cols = g.im2col(&input.data[i * in_len..(i + 1) * in_len]);
            let mut dw = vec![0.0f32; g.cout * k];
            // go (cout x np) * cols^T (np x k)
            gemm(
                g.cout,
                np,
                k,
                (go, np as isize, 1),
                (&cols, 1, np as isize),
                0.0,
                &mut dw,
            );
            dw
        });
        (dx, dw)
    });

    let mut dx_all = need_x.then(|| Vec::with_capacity(n * in_len));
    let mut dw_all = need_w.then(|| vec![0.0f32; g.cout * k]);
    for (dx, dw) in per_item {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            for (a, b) in all.iter_mut().zip(dw) {
                *a += b;
            }
        }
    }
    let db = need_b.then(|| {
        let mut db = vec![0.0f32; g.cout];
        for i in 0..n {
            for (co, d) in db.iter_mut().enumerate() {
                let off = (i * g.cout + co) * np;
                *d += grad_out[off..off + np].iter().sum::<f32>();
            }
        }
        db
    });
    Ok((dx_all, dw_all, db))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same("add", a, b)?;
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        grad: None,
    })
}

fn shuffle_geometry(shape: Shape, scale: usize) -> Result<Shape> {
    let r2 = scale * scale;
    if scale == 0 || !shape.c().is_multiple_of(r2) {
        return Err(invalid(
            "pixel_shuffle",
            format!("{} channels not divisible by scale^2 = {}", shape.c(), r2),
        ));
    }
    Ok(Shape::new(
        shape.n(),
        shape.c() / r2,
        shape.h() * scale,
        shape.w() * scale,
    ))
}

/// Index map of the sub-pixel layout: for each output element, the input
/// element it reads from. Input channel `c*r*r + i*r + j` feeds output
/// channel `c` at offset (i, j) of each r x r cell.
fn shuffle_index(input: Shape, scale: usize) -> Result<(Shape, Vec<usize>)> {
    let out = shuffle_geometry(input, scale)?;
    let [n, c, ho, wo] = out.0;
    let (h, w) = (input.h(), input.w());
    let mut idx = Vec::with_capacity(out.numel());
    for b in 0..n {
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    let ic = ch * scale * scale + (y % scale) * scale + (x % scale);
                    idx.push(((b * input.c() + ic) * h + y / scale) * w + x / scale);
                }
            }
        }
    }
    Ok((out, idx))
}

pub fn pixel_shuffle(input: &Tensor, scale: usize) -> Result<Tensor> {
    let (shape, idx) = shuffle_index(input.shape, scale)?;
    Tensor::new(shape, idx.iter().map(|&i| input.data[i]).collect())
}

pub(crate) fn pixel_shuffle_backward(
    input: Shape,
    scale: usize,
    grad_out: &[f32],
) -> Result<Vec<f32>> {
    let (_, idx) = shuffle_index(input, scale)?;
    let mut g = vec![0.0f32; input.numel()];
    for (o, &i) in idx.iter().enumerate() {
        g[i] += grad_out[o];
    }
    Ok(g)
}

/// Nearest-neighbour upscaling by an integer factor.
pub fn upscale_nearest(input: &Tensor, scale: usize) -> Tensor {
    let [n, c, h, w] = input.shape.0;
    let (ho, wo) = (h * scale, w * scale);
    let mut data = Vec::with_capacity(n * c * ho * wo);
    for plane in input.data.chunks(h * w) {
        for y in 0..ho {
            for x in 0..wo {
                data.push(plane[(y / scale) * w + x / scale]);
            }
        }
    }
    Tensor {
        shape: Shape::new(n, c, ho, wo),
        data,
        grad: None,
    }
}

/// Box-filter downsampling by an integer factor; trailing rows/columns that
/// do not fill a whole cell are dropped.
pub fn downscale_box(input: &Tensor, scale: usize) -> Tensor {
    let [n, c, h, w] = input.shape.0;
    let (ho, wo) = (h / scale, w / scale);
    let inv = 1.0 / (scale * scale) as f32;
    let mut data = Vec::with_capacity(n * c * ho * wo);
    for plane in input.data.chunks(h * w) {
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = 0.0f32;
                for dy in 0..scale {
                    for dx in 0..scale {
                        acc += plane[(y * scale + dy) * w + x * scale + dx];
                    }
                }
                data.push(acc * inv);
            }
        }
    }
    Tensor {
        shape: Shape::new(n, c, ho, wo),
        data,
        grad: None,
    }
}
