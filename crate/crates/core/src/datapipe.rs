//! Image I/O, patch tiling, synthetic data and calibration-set sampling.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::complexity;
use crate::tensor::{downscale_box, Shape, Tensor};

/// Patch size used when none is configured.
pub const DEFAULT_PATCH: usize = 96;

/// Tile an image into non-overlapping `patch x patch` tiles in row-major
/// order. Right/bottom remainders are padded by edge replication.
pub fn extract_patches(img: &Tensor, patch: usize) -> Vec<Tensor> {
    let [n, c, h, w] = img.shape().0;
    if h == 0 || w == 0 || patch == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for b in 0..n {
        for ty in (0..h).step_by(patch) {
            for tx in (0..w).step_by(patch) {
                let mut data = Vec::with_capacity(c * patch * patch);
                for ch in 0..c {
                    for y in 0..patch {
                        let sy = (ty + y).min(h - 1);
                        for x in 0..patch {
                            let sx = (tx + x).min(w - 1);
                            data.push(img.at(b, ch, sy, sx));
                        }
                    }
                }
                out.push(Tensor::new(Shape::new(1, c, patch, patch), data).expect("sized"));
            }
        }
    }
    out
}

/// Inverse of [`extract_patches`] for one image: stitch tiles back and crop
/// to `h x w`.
pub fn stitch_patches(tiles: &[Tensor], h: usize, w: usize) -> Result<Tensor> {
    let first = tiles.first().ok_or(Error::Empty("stitch_patches"))?;
    let [_, c, p, _] = first.shape().0;
    let cols = w.div_ceil(p);
    let mut data = vec![0.0f32; c * h * w];
    for (i, t) in tiles.iter().enumerate() {
        let (ty, tx) = ((i / cols) * p, (i % cols) * p);
        for ch in 0..c {
            for y in 0..p.min(h.saturating_sub(ty)) {
                for x in 0..p.min(w.saturating_sub(tx)) {
                    data[(ch * h + ty + y) * w + tx + x] = t.at(0, ch, y, x);
                }
            }
        }
    }
    Tensor::new(Shape::new(1, c, h, w), data)
}

/// One calibration patch with its complexity score.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibItem {
    pub patch: Tensor,
    pub complexity: f32,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibSet {
    pub items: Vec<CalibItem>,
    pub sampling_seed: u64,
}

impl CalibSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn patches(&self) -> Vec<Tensor> {
        self.items.iter().map(|i| i.patch.clone()).collect()
    }

    pub fn complexities(&self) -> Vec<f32> {
        self.items.iter().map(|i| i.complexity).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "groups")]
pub enum Sampling {
    Random,
    /// Complexity-sorted pool split into this many equal-count groups.
    Stratified(usize),
}

/// A source image with an identifier.
#[derive(Debug, Clone)]
pub struct PoolImage {
    pub id: String,
    pub image: Tensor,
}

/// Choose `n` pool indices. Random: seeded uniform sample without
/// replacement. Stratified: sort by complexity, split into equal-count
/// groups, draw `ceil(n / groups)` per group, then trim uniformly to `n`.
pub fn sample_indices(
    complexities: &[f32],
    n: usize,
    strategy: Sampling,
    seed: u64,
) -> Result<Vec<usize>> {
    let pool = complexities.len();
    if pool < n {
        return Err(crate::error::invalid(
            "sample_calib",
            format!("pool of {pool} images is smaller than requested {n}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match strategy {
        Sampling::Random => Ok(rand::seq::index::sample(&mut rng, pool, n).into_vec()),
        Sampling::Stratified(groups) => {
            if groups == 0 || groups > pool {
                return Err(crate::error::invalid(
                    "sample_calib",
                    format!("{groups} strata for a pool of {pool}"),
                ));
            }
            let mut order: Vec<usize> = (0..pool).collect();
            order.sort_by(|&a, &b| complexities[a].total_cmp(&complexities[b]).then(a.cmp(&b)));
            let per = n.div_ceil(groups);
            let mut picked = Vec::new();
            for g in strata_bounds(pool, groups) {
                let members = &order[g.0..g.1];
                let take = per.min(members.len());
                let idx = rand::seq::index::sample(&mut rng, members.len(), take).into_vec();
                picked.extend(idx.into_iter().map(|i| members[i]));
            }
            if picked.len() > n {
                let keep = rand::seq::index::sample(&mut rng, picked.len(), n).into_vec();
                let mut keep_sorted = keep;
                keep_sorted.sort_unstable();
                picked = keep_sorted.into_iter().map(|i| picked[i]).collect();
            }
            Ok(picked)
        }
    }
}

/// Half-open ranges partitioning `0..pool` into `groups` near-equal runs.
pub fn strata_bounds(pool: usize, groups: usize) -> Vec<(usize, usize)> {
    (0..groups)
        .map(|g| (g * pool / groups, (g + 1) * pool / groups))
        .collect()
}

/// Sample `n` whole images, tile each into patches, and score every patch.
pub fn sample_calib(
    pool: &[PoolImage],
    n: usize,
    strategy: Sampling,
    patch: usize,
    seed: u64,
) -> Result<CalibSet> {
    let scores: Vec<f32> = pool
        .iter()
        .map(|p| complexity(&p.image))
        .collect::<Result<_>>()?;
    let picked = sample_indices(&scores, n, strategy, seed)?;
    let mut items = Vec::new();
    for i in picked {
        for (t, tile) in extract_patches(&pool[i].image, patch)
            .into_iter()
            .enumerate()
        {
            let c = complexity(&tile)?;
            items.push(CalibItem {
                patch: tile,
                complexity: c,
                source_id: format!("{}#{t}", pool[i].id),
            });
        }
    }
    Ok(CalibSet {
        items,
        sampling_seed: seed,
    })
}

/// Load an 8-bit RGB or grayscale PNG as a 1x3xHxW tensor in [0, 1].
/// Grayscale is replicated into three channels; alpha is dropped.
pub fn load_png(path: &Path) -> Result<Tensor> {
    use image::ColorType;
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let unsupported = |what: &str| Error::UnsupportedImage {
        path: path.to_path_buf(),
        msg: what.to_string(),
    };
    let rgb = match img.color() {
        ColorType::Rgb8 | ColorType::Rgba8 | ColorType::L8 | ColorType::La8 => img.to_rgb8(),
        other => return Err(unsupported(&format!("{other:?} (only 8-bit RGB/gray)"))),
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Tensor::new(Shape::new(1, 3, h, w), data)
}

/// Write the first image of `img` as an 8-bit RGB PNG, clamping to [0, 1].
pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    let [_, c, h, w] = img.shape().0;
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] = std::array::from_fn(|ch| {
                let v = img.at(0, ch.min(c - 1), y, x);
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// PNG files of a directory in lexicographic filename order.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| crate::error::io_at(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Crop so both sides are multiples of `scale`.
pub fn crop_to_multiple(img: &Tensor, scale: usize) -> Tensor {
    let [_, c, h, w] = img.shape().0;
    let (hc, wc) = (h - h % scale, w - w % scale);
    if (hc, wc) == (h, w) {
        return img.clone();
    }
    let mut data = Vec::with_capacity(c * hc * wc);
    for ch in 0..c {
        for y in 0..hc {
            for x in 0..wc {
                data.push(img.at(0, ch, y, x));
            }
        }
    }
    Tensor::new(Shape::new(1, c, hc, wc), data).expect("sized")
}

/// Families of procedural HR content.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Constant,
    /// Smooth colour ramp.
    Gradient,
    /// Sum of oriented sinusoidal gratings.
    Grating,
    /// Random filled polygons over a flat background.
    Polygons,
    /// Box-smoothed uniform noise.
    Noise,
    Checker,
}

/// Families of the training and calibration mixture.
const MIXTURE: [SynthKind; 3] = [SynthKind::Grating, SynthKind::Polygons, SynthKind::Noise];

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

/// Render one `size x size` synthetic HR image.
pub fn synth_image(kind: SynthKind, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = vec![0.0f32; 3 * size * size];
    let s = size as f32;
    let set = |data: &mut [f32], c: usize, y: usize, x: usize, v: f32| {
        data[(c * size + y) * size + x] = clamp01(v);
    };
    match kind {
        SynthKind::Constant => {
            let col: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
            for (c, &v) in col.iter().enumerate() {
                for y in 0..size {
                    for x in 0..size {
                        set(&mut data, c, y, x, v);
                    }
                }
            }
        }
        SynthKind::Gradient => {
            let a: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
            let b: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
            let th: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let (dx, dy) = (th.cos(), th.sin());
            for y in 0..size {
                for x in 0..size {
                    let t = 0.5 + ((x as f32 / s - 0.5) * dx + (y as f32 / s - 0.5) * dy) * 0.7;
                    for c in 0..3 {
                        set(&mut data, c, y, x, a[c] + (b[c] - a[c]) * t);
                    }
                }
            }
        }
        SynthKind::Grating => {
            let waves: Vec<(f32, f32, f32, f32, [f32; 3])> = (0..rng.random_range(1..=3))
                .map(|_| {
                    let th: f32 = rng.random_range(0.0..std::f32::consts::PI);
                    let period: f32 = rng.random_range(2.5..16.0);
                    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
                    let amp: f32 = rng.random_range(0.1..0.3);
                    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
                    (th, period, phase, amp, tint)
                })
                .collect();
            let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.65));
            for y in 0..size {
                for x in 0..size {
                    let mut acc = base;
                    for &(th, period, phase, amp, tint) in &waves {
                        let u = x as f32 * th.cos() + y as f32 * th.sin();
                        let v = amp * (std::f32::consts::TAU * u / period + phase).sin();
                        for c in 0..3 {
                            acc[c] += v * tint[c];
                        }
                    }
                    for (c, &v) in acc.iter().enumerate() {
                        set(&mut data, c, y, x, v);
                    }
                }
            }
        }
        SynthKind::Polygons => {
            let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            for (c, &v) in bg.iter().enumerate() {
                for y in 0..size {
                    for x in 0..size {
                        set(&mut data, c, y, x, v);
                    }
                }
            }
            for _ in 0..rng.random_range(3..12) {
                let col: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
                let verts: Vec<(f32, f32)> = (0..3)
                    .map(|_| {
                        (
                            rng.random_range(-0.1..1.1) * s,
                            rng.random_range(-0.1..1.1) * s,
                        )
                    })
                    .collect();
                for y in 0..size {
                    for x in 0..size {
                        if in_triangle((x as f32 + 0.5, y as f32 + 0.5), &verts) {
                            for (c, &v) in col.iter().enumerate() {
                                set(&mut data, c, y, x, v);
                            }
                        }
                    }
                }
            }
        }
        SynthKind::Noise => {
            let radius = rng.random_range(0..3usize);
            let amp: f32 = rng.random_range(0.3..1.0);
            let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
            let raw: Vec<f32> = (0..3 * size * size)
                .map(|_| rng.random_range(-0.5..0.5))
                .collect();
            for c in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        let mut acc = 0.0;
                        let mut cnt = 0.0;
                        for yy in y.saturating_sub(radius)..(y + radius + 1).min(size) {
                            for xx in x.saturating_sub(radius)..(x + radius + 1).min(size) {
                                acc += raw[(c * size + yy) * size + xx];
                                cnt += 1.0;
                            }
                        }
                        set(&mut data, c, y, x, base[c] + amp * acc / cnt);
                    }
                }
            }
        }
        SynthKind::Checker => {
            // rotated, non-integer cells so edges do not align with the pixel grid
            let cell: f32 = rng.random_range(2.5..9.0);
            let th: f32 = rng.random_range(0.0..std::f32::consts::PI);
            let (ox, oy): (f32, f32) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
            let a: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.4));
            let b: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
            for y in 0..size {
                for x in 0..size {
                    let (fx, fy) = (x as f32 + ox, y as f32 + oy);
                    let u = (fx * th.cos() + fy * th.sin()) / cell;
                    let v = (fy * th.cos() - fx * th.sin()) / cell;
                    let on = (u.floor() as i64 + v.floor() as i64).rem_euclid(2) == 0;
                    for c in 0..3 {
                        set(&mut data, c, y, x, if on { a[c] } else { b[c] });
                    }
                }
            }
        }
    }
    Tensor::new(Shape::new(1, 3, size, size), data).expect("sized")
}

fn in_triangle(p: (f32, f32), v: &[(f32, f32)]) -> bool {
    let sign = |a: (f32, f32), b: (f32, f32), c: (f32, f32)| {
        (a.0 - c.0) * (b.1 - c.1) - (b.0 - c.0) * (a.1 - c.1)
    };
    let d1 = sign(p, v[0], v[1]);
    let d2 = sign(p, v[1], v[2]);
    let d3 = sign(p, v[2], v[0]);
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

/// HR / LR pair.
#[derive(Debug, Clone)]
pub struct SrPair {
    pub id: String,
    pub hr: Tensor,
    pub lr: Tensor,
}

/// Seeded mixture of gratings, polygons and smoothed noise.
pub fn synth_pairs(count: usize, hr_size: usize, scale: usize, seed: u64) -> Vec<SrPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let kind = MIXTURE[rng.random_range(0..MIXTURE.len())];
            let hr = synth_image(kind, hr_size, &mut rng);
            let lr = downscale_box(&hr, scale);
            SrPair {
                id: format!("synth{i:04}"),
                hr,
                lr,
            }
        })
        .collect()
}

/// Probe set spanning flat, low-texture and high-texture content, in that
/// order of expected complexity.
pub fn synth_probe_set(per_kind: usize, hr_size: usize, scale: usize, seed: u64) -> Vec<SrPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [
        ("const", SynthKind::Constant),
        ("ramp", SynthKind::Gradient),
        ("grating", SynthKind::Grating),
        ("checker", SynthKind::Checker),
        ("noise", SynthKind::Noise),
    ];
    let mut out = Vec::new();
    for (name, kind) in kinds {
        for i in 0..per_kind {
            let hr = synth_image(kind, hr_size, &mut rng);
            let lr = downscale_box(&hr, scale);
            out.push(SrPair {
                id: format!("{name}{i:02}"),
                hr,
                lr,
            });
        }
    }
    out
}

/// Textured pairs only (no constant or ramp images), cycling through the
/// textured families.
pub fn textured_pairs(count: usize, hr_size: usize, scale: usize, seed: u64) -> Vec<SrPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [
        SynthKind::Grating,
        SynthKind::Polygons,
        SynthKind::Noise,
        SynthKind::Checker,
    ];
    (0..count)
        .map(|i| {
            let hr = synth_image(kinds[i % kinds.len()], hr_size, &mut rng);
            let lr = downscale_box(&hr, scale);
            SrPair {
                id: format!("tex{i:03}"),
                hr,
                lr,
            }
        })
        .collect()
}

/// LR halves of `pairs` as a calibration pool.
pub fn lr_pool(pairs: &[SrPair]) -> Vec<PoolImage> {
    pairs
        .iter()
        .map(|p| PoolImage {
            id: p.id.clone(),
            image: p.lr.clone(),
        })
        .collect()
}
