//! Initialization phase: EMA range observation, OMSE weight bounds,
//! bit-aware clipping, and construction of the bit mappings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitmapping::{init_i2b, init_l2b, percentile_nearest_rank, BitMapper, L2BMapper};
use crate::error::{Error, Result};
use crate::metrics::population_std;
use crate::parallel;
use crate::quantizer::{
    quantize_act_scalar, quantize_wgt_scalar, ActQuant, BitValue, WgtQuant, BIT_MAX, BIT_MIN,
};
use crate::srnet::{QuantParams, QuantState, SrNetwork, STATIC_EDGE_BITS};
use crate::tensor::Tensor;

/// Width given to a collapsed (constant) activation range.
pub const DEGENERATE_WIDTH: f32 = 1e-4;
/// Bound used for an all-zero weight tensor.
pub const ZERO_WEIGHT_BOUND: f32 = 1e-4;
/// Candidate count of both range sweeps.
pub const SWEEP_STEPS: usize = 100;
/// Cap on pooled activation samples per layer.
pub const MAX_POOLED_SAMPLES: usize = 1 << 20;

pub fn widen_degenerate(lower: f32, upper: f32) -> ActQuant {
    if upper > lower {
        ActQuant { lower, upper }
    } else {
        ActQuant {
            lower,
            upper: lower + DEGENERATE_WIDTH,
        }
    }
}

/// Exponential moving average of per-layer minima and maxima. The first
/// observation is taken verbatim.
#[derive(Debug, Clone)]
pub struct RangeObserver {
    pub momentum: f32,
    pub running_min: Vec<f32>,
    pub running_max: Vec<f32>,
    pub observations: usize,
}

impl RangeObserver {
    pub fn new(layers: usize, momentum: f32) -> Self {
        RangeObserver {
            momentum,
            running_min: vec![0.0; layers],
            running_max: vec![0.0; layers],
            observations: 0,
        }
    }

    /// Fold one batch's per-layer (min, max) statistics.
    pub fn observe(&mut self, stats: &[(f32, f32)]) {
        let m = self.momentum;
        for (k, &(lo, hi)) in stats.iter().enumerate() {
            if self.observations == 0 {
                self.running_min[k] = lo;
                self.running_max[k] = hi;
            } else {
                self.running_min[k] = m * self.running_min[k] + (1.0 - m) * lo;
                self.running_max[k] = m * self.running_max[k] + (1.0 - m) * hi;
            }
        }
        self.observations += 1;
    }

    pub fn ranges(&self) -> Vec<(f32, f32)> {
        self.running_min
            .iter()
            .zip(&self.running_max)
            .map(|(&a, &b)| (a, b))
            .collect()
    }
}

/// How activation ranges are first estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeInit {
    MinMax,
    /// 1st / 99th percentile of each batch.
    Percentile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// Bound minimizing the L2 quantization error.
    Omse,
    /// Bound equal to `max |w|`.
    MaxAbs,
}

fn batch_stat(values: &[&[f32]], method: RangeInit) -> (f32, f32) {
    match method {
        RangeInit::MinMax => values
            .iter()
            .flat_map(|v| v.iter())
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            }),
        RangeInit::Percentile => {
            let mut all: Vec<f32> = values.iter().flat_map(|v| v.iter().copied()).collect();
            all.sort_by(f32::total_cmp);
            (
                percentile_nearest_rank(&all, 1.0),
                percentile_nearest_rank(&all, 99.0),
            )
        }
    }
}

/// Run the calibration images through the FP network in batches of
/// `batch_size` and track EMA statistics of every quantized layer's input.
pub fn observe_ranges(
    net: &SrNetwork,
    images: &[Tensor],
    batch_size: usize,
    momentum: f32,
    method: RangeInit,
) -> Result<Vec<(f32, f32)>> {
    if images.is_empty() {
        return Err(Error::Empty("observe_ranges"));
    }
    let inputs = collect_inputs(net, images)?;
    Ok(observe_collected(
        &inputs,
        net.num_quantized(),
        batch_size,
        momentum,
        method,
    ))
}

/// MinMax observation with the default method.
pub fn observe_minmax(
    net: &SrNetwork,
    images: &[Tensor],
    batch_size: usize,
    momentum: f32,
) -> Result<Vec<(f32, f32)>> {
    observe_ranges(net, images, batch_size, momentum, RangeInit::MinMax)
}

fn collect_inputs(net: &SrNetwork, images: &[Tensor]) -> Result<Vec<Vec<Tensor>>> {
    parallel::map(images, |img| net.forward_fp(img).map(|r| r.inputs))
        .into_iter()
        .collect()
}

fn observe_collected(
    inputs: &[Vec<Tensor>],
    layers: usize,
    batch_size: usize,
    momentum: f32,
    method: RangeInit,
) -> Vec<(f32, f32)> {
    let mut obs = RangeObserver::new(layers, momentum);
    for batch in inputs.chunks(batch_size.max(1)) {
        let stats: Vec<(f32, f32)> = (0..layers)
            .map(|k| {
                let v: Vec<&[f32]> = batch.iter().map(|per| per[k].data()).collect();
                batch_stat(&v, method)
            })
            .collect();
        obs.observe(&stats);
    }
    obs.ranges()
}

fn wgt_sq_error(w: &[f32], q: WgtQuant, bits: u32) -> f64 {
    w.iter()
        .map(|&v| {
            let d = (v - quantize_wgt_scalar(v, q, bits)) as f64;
            d * d
        })
        .sum()
}

fn act_sq_error(x: &[f32], q: ActQuant, bits: u32) -> f64 {
    x.iter()
        .map(|&v| {
            let d = (v - quantize_act_scalar(v, q, bits)) as f64;
            d * d
        })
        .sum()
}

/// Symmetric bound from the grid `max|w| * i / 100`, `i = 1..=100`, that
/// minimizes the L2 quantization error; ties go to the larger bound.
pub fn omse_weight_range(w: &Tensor, bits: BitValue) -> Result<f32> {
    if w.numel() == 0 {
        return Err(Error::Empty("omse_weight_range"));
    }
    let b = bits.effective();
    let amax = w.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if amax == 0.0 {
        log::warn!("all-zero weight tensor; using bound {ZERO_WEIGHT_BOUND}");
        return Ok(ZERO_WEIGHT_BOUND);
    }
    let mut best = (f64::INFINITY, amax);
    for i in (1..=SWEEP_STEPS).rev() {
        let bound = amax * i as f32 / SWEEP_STEPS as f32;
        let err = wgt_sq_error(w.data(), WgtQuant { bound }, b);
        if err < best.0 {
            best = (err, bound);
        }
    }
    Ok(best.1)
}

/// Scale factor `eps` in `{1.00, 0.99, ..., 0.01}` minimizing the L2 error
/// of quantizing `samples` over `[eps*lower, eps*upper]`; ties go to the
/// larger factor.
pub fn bit_aware_clip(samples: &[f32], lower: f32, upper: f32, bits: BitValue) -> Result<f32> {
    ActQuant::new(lower, upper)?;
    let b = bits.effective();
    let mut best = (f64::INFINITY, 1.0f32);
    for i in 0..SWEEP_STEPS {
        let eps = (SWEEP_STEPS - i) as f32 / SWEEP_STEPS as f32;
        let q = ActQuant {
            lower: eps * lower,
            upper: eps * upper,
        };
        let err = act_sq_error(samples, q, b);
        if err < best.0 {
            best = (err, eps);
        }
    }
    Ok(best.1)
}

/// Seeded uniform subsample (without replacement, original order kept) of
/// at most `cap` elements.
pub fn subsample(values: Vec<f32>, cap: usize, seed: u64) -> Vec<f32> {
    if values.len() <= cap {
        return values;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, values.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| values[i]).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitOptions {
    pub p_i: f64,
    pub p_l: f64,
    pub momentum: f32,
    pub factor_magnitude: u32,
    pub batch_size: usize,
    pub range_init: RangeInit,
    pub weight_init: WeightInit,
    /// Apply the bit-aware range sweep after range observation.
    pub bit_aware_clip: bool,
    /// Derive image/layer factors; when off all factors stay 0.
    pub bit_mapping: bool,
    pub seed: u64,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            p_i: 10.0,
            p_l: 30.0,
            momentum: 0.9,
            factor_magnitude: 1,
            batch_size: 16,
            range_init: RangeInit::MinMax,
            weight_init: WeightInit::Omse,
            bit_aware_clip: true,
            bit_mapping: true,
            seed: 0,
        }
    }
}

/// One row of the calibration report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub layer: usize,
    pub sensitivity: f32,
    pub factor: i32,
    pub lower: f32,
    pub upper: f32,
    pub eps: f32,
    pub wgt_bound: f32,
}

#[derive(Debug, Clone)]
pub struct InitResult {
    pub state: QuantState,
    pub report: Vec<LayerReport>,
}

/// Initialization phase over calibration images with precomputed
/// complexities.
pub fn run_init_phase(
    net: &SrNetwork,
    images: &[Tensor],
    complexities: &[f32],
    opts: &InitOptions,
) -> Result<InitResult> {
    if images.is_empty() {
        return Err(Error::Empty("run_init_phase"));
    }
    let cfg = net.config;
    let qconvs = cfg.quantized_convs();
    let k = qconvs.len();

    let inputs = collect_inputs(net, images)?;
    let sensitivity: Vec<f32> = (0..k)
        .map(|l| {
            let s: f64 = inputs.iter().map(|per| population_std(per[l].data())).sum();
            (s / images.len() as f64) as f32
        })
        .collect();

    let magnitude = if opts.bit_mapping {
        opts.factor_magnitude
    } else {
        0
    };
    let i2b = init_i2b(complexities, opts.p_i)?;
    let adaptive: Vec<bool> = qconvs.iter().map(|&c| cfg.is_body(c)).collect();
    let adaptive_sens: Vec<f32> = sensitivity
        .iter()
        .zip(&adaptive)
        .filter(|(_, &a)| a)
        .map(|(&s, _)| s)
        .collect();
    let body_l2b = init_l2b(&adaptive_sens, opts.p_l, magnitude)?;
    let mut body_factors = body_l2b.factors.iter();
    let factors = adaptive
        .iter()
        .map(|&a| {
            if a {
                *body_factors.next().expect("one factor per adaptive layer")
            } else {
                BitValue::new(0.0)
            }
        })
        .collect();
    let mapper = BitMapper {
        i2b,
        l2b: L2BMapper {
            lower: body_l2b.lower,
            upper: body_l2b.upper,
            factors,
        },
        magnitude,
    };

    let observed = observe_collected(&inputs, k, opts.batch_size, opts.momentum, opts.range_init);

    let rows = parallel::map_range(k, |l| -> Result<(QuantParams, LayerReport)> {
        let conv = qconvs[l];
        let base_bits = if adaptive[l] {
            cfg.b_base
        } else {
            STATIC_EDGE_BITS
        };
        let factor = if adaptive[l] {
            mapper.l2b.factor(l, magnitude)
        } else {
            0
        };
        let act_bits = (base_bits as i32 + factor).clamp(BIT_MIN as i32, BIT_MAX as i32) as u32;

        let (lo, hi) = observed[l];
        let mut act = widen_degenerate(lo, hi);
        let mut eps = 1.0;
        if opts.bit_aware_clip {
            let pooled: Vec<f32> = inputs
                .iter()
                .flat_map(|per| per[l].data().iter().copied())
                .collect();
            let pooled = subsample(pooled, MAX_POOLED_SAMPLES, opts.seed.wrapping_add(l as u64));
            eps = bit_aware_clip(&pooled, act.lower, act.upper, BitValue::fixed(act_bits))?;
            act = widen_degenerate(eps * act.lower, eps * act.upper);
        }

        let w = &net.convs[conv].weight;
        let bound = match opts.weight_init {
            WeightInit::Omse => omse_weight_range(w, BitValue::fixed(base_bits))?,
            WeightInit::MaxAbs => w
                .data()
                .iter()
                .fold(0.0f32, |m, v| m.max(v.abs()))
                .max(ZERO_WEIGHT_BOUND),
        };
        let params = QuantParams {
            act,
            wgt: WgtQuant { bound },
            base_bits,
            adaptive: adaptive[l],
        };
        let report = LayerReport {
            layer: conv,
            sensitivity: sensitivity[l],
            factor,
            lower: act.lower,
            upper: act.upper,
            eps,
            wgt_bound: bound,
        };
        Ok((params, report))
    });
    let mut params = Vec::with_capacity(k);
    let mut report = Vec::with_capacity(k);
    for r in rows {
        let (p, rep) = r?;
        params.push(p);
        report.push(rep);
    }
    Ok(InitResult {
        state: QuantState { params, mapper },
        report,
    })
}
