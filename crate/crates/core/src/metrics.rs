//! Image complexity, layer sensitivity, FAB, PSNR/SSIM and the layer-wise
//! error separability report.

use crate::error::{Error, Result};
use crate::parallel;
use crate::quantizer::{quantize_act_scalar, ActQuant};
use crate::srnet::SrNetwork;
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Luminance plane (H*W) of a single image; 1-channel images pass through.
pub fn luminance(img: &Tensor) -> Vec<f32> {
    let s = img.shape();
    let hw = s.h() * s.w();
    let d = &img.data()[..s.item_len()];
    if s.c() >= 3 {
        (0..hw)
            .map(|i| 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i])
            .collect()
    } else {
        d[..hw].to_vec()
    }
}

/// Mean absolute forward-difference gradient of luminance:
/// `(mean|dx| + mean|dy|) / 2`, an empty direction contributing 0.
pub fn complexity(img: &Tensor) -> Result<f32> {
    let s = img.shape();
    if s.numel() == 0 {
        return Err(Error::Empty("complexity"));
    }
    let (h, w) = (s.h(), s.w());
    let y = luminance(img);
    let mut gx = 0.0f64;
    let mut gy = 0.0f64;
    for r in 0..h {
        for c in 0..w {
            let v = y[r * w + c] as f64;
            if c + 1 < w {
                gx += (y[r * w + c + 1] as f64 - v).abs();
            }
            if r + 1 < h {
                gy += (y[(r + 1) * w + c] as f64 - v).abs();
            }
        }
    }
    let mx = if w > 1 {
        gx / (h * (w - 1)) as f64
    } else {
        0.0
    };
    let my = if h > 1 {
        gy / ((h - 1) * w) as f64
    } else {
        0.0
    };
    Ok((0.5 * (mx + my)) as f32)
}

pub(crate) fn population_std(data: &[f32]) -> f64 {
    let n = data.len().max(1) as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    var.sqrt()
}

/// Average over images of the population std of each quantized layer's
/// input activation.
pub fn layer_sensitivity(net: &SrNetwork, images: &[Tensor]) -> Result<Vec<f32>> {
    if images.is_empty() {
        return Err(Error::Empty("layer_sensitivity"));
    }
    let per_image = parallel::map(images, |img| -> Result<Vec<f64>> {
        let r = net.forward_fp(img)?;
        Ok(r.inputs.iter().map(|t| population_std(t.data())).collect())
    });
    let mut acc = vec![0.0f64; net.num_quantized()];
    for stds in per_image {
        for (a, s) in acc.iter_mut().zip(stds?) {
            *a += s;
        }
    }
    Ok(acc
        .iter()
        .map(|a| (a / images.len() as f64) as f32)
        .collect())
}

/// Feature average bit-width over every (image, layer) entry.
pub fn fab(bit_log: &[Vec<u32>]) -> Result<f64> {
    let n: usize = bit_log.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::Empty("fab"));
    }
    let s: u64 = bit_log.iter().flatten().map(|&b| b as u64).sum();
    Ok(s as f64 / n as f64)
}

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair("mse", a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.numel().max(1) as f64)
}

/// `10 log10(1 / MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an h x w plane.
fn filter_valid(p: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let wo = w + 1 - k;
    let ho = h + 1 - k;
    let mut tmp = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            tmp[r * wo + c] = (0..k).map(|i| p[r * w + c + i] * win[i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..k).map(|i| tmp[(r + i) * wo + c] * win[i]).sum();
        }
    }
    (out, ho, wo)
}

/// Gaussian-windowed SSIM (11x11, sigma 1.5) on luminance, averaged over
/// valid window positions. Images smaller than the window use a window as
/// large as their smaller side.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let s = a.shape();
    if s.numel() == 0 {
        return Err(Error::Empty("ssim"));
    }
    let (h, w) = (s.h(), s.w());
    let size = 11.min(h).min(w);
    let win = gaussian_window(size, 1.5);
    let x: Vec<f64> = luminance(a).into_iter().map(f64::from).collect();
    let y: Vec<f64> = luminance(b).into_iter().map(f64::from).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (mx, ho, wo) = filter_valid(&x, h, w, &win);
    let (my, _, _) = filter_valid(&y, h, w, &win);
    let (sxx, _, _) = filter_valid(&xx, h, w, &win);
    let (syy, _, _) = filter_valid(&yy, h, w, &win);
    let (sxy, _, _) = filter_valid(&xy, h, w, &win);
    let mut total = 0.0;
    for i in 0..ho * wo {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / (ho * wo) as f64)
}

/// Cosine similarity; zero vectors compare as 0 unless both are zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Pairwise cosine matrix of the rows of `rows`; diagonal fixed at 1.
pub fn cosine_matrix(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let c = cosine(&rows[i], &rows[j]);
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    m
}

pub fn mean_off_diagonal(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                s += v;
            }
        }
    }
    s / (n * (n - 1)) as f64
}

/// Layer-wise quantization error profile of each image and its cosine
/// similarity structure.
#[derive(Debug, Clone)]
pub struct SeparabilityReport {
    pub probe_bits: u32,
    /// `errors[image][layer]`: MSE between FP and quantized layer input.
    pub errors: Vec<Vec<f64>>,
    /// Image x image cosine similarity of the error vectors.
    pub across_images: Vec<Vec<f64>>,
    /// Layer x layer cosine similarity of the transposed error matrix.
    pub across_layers: Vec<Vec<f64>>,
}

impl SeparabilityReport {
    pub fn mean_image_similarity(&self) -> f64 {
        mean_off_diagonal(&self.across_images)
    }
}

/// Quantize every quantized layer's FP input with a static `probe_bits`
/// quantizer whose range is the min/max of that layer over `images`, and
/// compare the per-layer errors across images.
pub fn separability_report(
    net: &SrNetwork,
    images: &[Tensor],
    probe_bits: u32,
) -> Result<SeparabilityReport> {
    if images.len() < 2 || net.num_quantized() < 2 {
        return Err(crate::error::invalid(
            "separability_report",
            "need at least 2 images and 2 quantized layers",
        ));
    }
    let inputs: Vec<Vec<Tensor>> =
        parallel::map(images, |img| net.forward_fp(img).map(|r| r.inputs))
            .into_iter()
            .collect::<Result<_>>()?;
    let k = net.num_quantized();
    let ranges: Vec<ActQuant> = (0..k)
        .map(|l| {
            let (lo, hi) = inputs
                .iter()
                .map(|per| per[l].min_max())
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), (c, d)| {
                    (a.min(c), b.max(d))
                });
            crate::calibration::widen_degenerate(lo, hi)
        })
        .collect();
    let errors: Vec<Vec<f64>> = inputs
        .iter()
        .map(|per| {
            per.iter()
                .zip(&ranges)
                .map(|(t, &q)| {
                    let s: f64 = t
                        .data()
                        .iter()
                        .map(|&v| {
                            let d = (v - quantize_act_scalar(v, q, probe_bits)) as f64;
                            d * d
                        })
                        .sum();
                    s / t.numel() as f64
                })
                .collect()
        })
        .collect();
    let transposed: Vec<Vec<f64>> = (0..k)
        .map(|l| errors.iter().map(|r| r[l]).collect())
        .collect();
    Ok(SeparabilityReport {
        probe_bits,
        across_images: cosine_matrix(&errors),
        across_layers: cosine_matrix(&transposed),
        errors,
    })
}

/// Mean off-diagonal image similarity after independently permuting each
/// image's layer-error vector, averaged over `resamples` draws. Permuting
/// destroys any shared layer profile while keeping each image's values.
pub fn shuffle_control(errors: &[Vec<f64>], resamples: usize, seed: u64) -> f64 {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..resamples {
        let shuffled: Vec<Vec<f64>> = errors
            .iter()
            .map(|row| {
                let mut r = row.clone();
                r.shuffle(&mut rng);
                r
            })
            .collect();
        total += mean_off_diagonal(&cosine_matrix(&shuffled));
    }
    total / resamples.max(1) as f64
}
