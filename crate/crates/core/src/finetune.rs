//! Fine-tuning of quantization parameters against the frozen FP network.
//!
//! Each batch runs three sub-steps, each with its own forward and backward:
//! the bit mapping (image thresholds and layer factors), then the weight
//! bounds, then the activation ranges. Network weights are never touched;
//! the teacher is the same network evaluated without quantizers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{normalized_distance, GradTape};
use crate::bitmapping::{i2b_surrogate_grad, BitDecision, I2BMapper};
use crate::calibration::DEGENERATE_WIDTH;
use crate::error::{invalid, Error, Result};
use crate::metrics::{fab, psnr};
use crate::optim::Adam;
use crate::parallel;
use crate::srnet::{GradSpec, Mode, QuantState, SrNetwork};
use crate::tensor::Tensor;

/// Smallest admissible weight bound after an update.
pub const MIN_WGT_BOUND: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_act: f64,
    pub lr_wgt: f64,
    pub lr_bitfactor: f64,
    pub lr_i2b: f64,
    /// Multiplier applied to every learning rate at each epoch end.
    pub lr_decay: f64,
    pub lambda_skt: f64,
    pub lambda_bit: f64,
    /// Target mean bit-width; `None` means the network's base bits.
    pub b_tar: Option<u32>,
    pub seed: u64,
    /// Let the reconstruction loss reach the bit factors.
    pub bit_recon_grad: bool,
    /// Let the bit loss reach the image thresholds.
    pub i2b_bit_loss_grad: bool,
    /// Units of the complexity axis while learning the image thresholds.
    /// Scores are computed on [0, 1] pixels; 255 expresses them, and with
    /// them `lr_i2b` and the tanh surrogate, in 8-bit pixel units.
    pub complexity_scale: f64,
    /// How the per-image L1 term is reduced over output elements.
    pub pix_reduction: PixReduction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixReduction {
    /// Sum over output elements on [0, 1] pixels.
    Sum,
    /// Mean over output elements on 8-bit (0 to 255) pixels.
    Mean8,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            batch_size: 2,
            lr_act: 0.01,
            lr_wgt: 0.01,
            lr_bitfactor: 0.01,
            lr_i2b: 0.1,
            lr_decay: 0.9,
            lambda_skt: 10.0,
            lambda_bit: 50.0,
            b_tar: None,
            seed: 0,
            bit_recon_grad: true,
            i2b_bit_loss_grad: true,
            complexity_scale: 255.0,
            pix_reduction: PixReduction::Sum,
        }
    }
}

impl FinetuneConfig {
    /// Every violated constraint, keyed by config name.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("finetune.batch_size must be >= 1".to_string());
        }
        for (name, v) in [
            ("lr_act", self.lr_act),
            ("lr_wgt", self.lr_wgt),
            ("lr_bitfactor", self.lr_bitfactor),
            ("lr_i2b", self.lr_i2b),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!(
                    "finetune.{name} must be a finite value >= 0, got {v}"
                ));
            }
        }
        for (name, v) in [
            ("lambda_skt", self.lambda_skt),
            ("lambda_bit", self.lambda_bit),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("finetune.{name} must be >= 0, got {v}"));
            }
        }
        if !(self.complexity_scale > 0.0 && self.complexity_scale.is_finite()) {
            errs.push(format!(
                "finetune.complexity_scale must be > 0, got {}",
                self.complexity_scale
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            errs.push(format!(
                "finetune.lr_decay must be in (0, 1], got {}",
                self.lr_decay
            ));
        }
        if let Some(b) = self.b_tar {
            if !(crate::quantizer::BIT_MIN..=crate::quantizer::BIT_MAX).contains(&b) {
                errs.push(format!("finetune.b_tar must be in [2, 8], got {b}"));
            }
        }
        errs
    }

    /// Learning-rate multiplier in effect during `epoch` (0-based).
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        self.lr_decay.powi(epoch as i32)
    }
}

/// Mean over the batch of per-image summed absolute differences.
pub fn loss_pix(out_q: &Tensor, out_fp: &Tensor) -> Result<f64> {
    if out_q.shape() != out_fp.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_pix",
            lhs: out_q.shape(),
            rhs: out_fp.shape(),
        });
    }
    let n = out_q.shape().n().max(1);
    let s: f64 = out_q
        .data()
        .iter()
        .zip(out_fp.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum();
    Ok(s / n as f64)
}

/// Mean over images and layers of the distance between L2-normalized
/// student and teacher features.
pub fn loss_skt(feats_q: &[Tensor], feats_fp: &[Tensor]) -> Result<f64> {
    if feats_q.len() != feats_fp.len() {
        return Err(invalid(
            "loss_skt",
            format!(
                "{} student vs {} teacher feature maps",
                feats_q.len(),
                feats_fp.len()
            ),
        ));
    }
    if feats_q.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut terms = 0usize;
    for (q, p) in feats_q.iter().zip(feats_fp) {
        if q.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "loss_skt",
                lhs: q.shape(),
                rhs: p.shape(),
            });
        }
        let len = q.shape().item_len();
        for i in 0..q.shape().n() {
            let r = i * len..(i + 1) * len;
            total += normalized_distance(&q.data()[r.clone()], &p.data()[r]);
            terms += 1;
        }
    }
    Ok(total / terms as f64)
}

/// `max(mean bits - b_tar, 0)` over every (image, layer) entry.
pub fn loss_bit(bit_log: &[Vec<u32>], b_tar: u32) -> Result<f64> {
    Ok((fab(bit_log)? - b_tar as f64).max(0.0))
}

/// Which quantization parameters a sub-step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubStep {
    BitMapping,
    WeightBounds,
    ActRanges,
}

impl SubStep {
    pub const ALL: [SubStep; 3] = [
        SubStep::BitMapping,
        SubStep::WeightBounds,
        SubStep::ActRanges,
    ];

    pub fn index(self) -> u8 {
        match self {
            SubStep::BitMapping => 1,
            SubStep::WeightBounds => 2,
            SubStep::ActRanges => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SubStep::BitMapping => "bit_mapping",
            SubStep::WeightBounds => "weight_bounds",
            SubStep::ActRanges => "act_ranges",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubStepReport {
    pub sub_step: SubStep,
    pub l_pix: f64,
    pub l_skt: f64,
    pub l_bit: f64,
    pub fab: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub sub_steps: Vec<SubStepReport>,
    /// Batch FAB under the parameters left by the last sub-step.
    pub fab: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub iter: usize,
    pub sub_step: u8,
    #[serde(rename = "L_pix")]
    pub l_pix: f64,
    #[serde(rename = "L_skt")]
    pub l_skt: f64,
    #[serde(rename = "L_bit")]
    pub l_bit: f64,
    #[serde(rename = "FAB")]
    pub fab: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_l_pix: f64,
    /// FAB of the calibration set under the end-of-epoch mapping.
    pub calib_fab: f64,
    /// PSNR of the quantized against the FP output on the probe set.
    pub probe_psnr: Option<f64>,
}

/// Teacher output and taps for one image.
#[derive(Debug, Clone)]
struct TeacherCache {
    output: Tensor,
    taps: Vec<Tensor>,
}

struct StudentPass {
    l1: f64,
    skt: f64,
    bits: Vec<f32>,
    wgt: Vec<f32>,
    lower: Vec<f32>,
    upper: Vec<f32>,
}

#[allow(clippy::too_many_arguments)]
fn student_pass(
    net: &SrNetwork,
    state: &QuantState,
    x: &Tensor,
    teacher: &TeacherCache,
    decision: &BitDecision,
    spec: Option<GradSpec>,
    lambda_skt: f64,
    reduction: PixReduction,
    batch: usize,
) -> Result<StudentPass> {
    let mut tape = GradTape::new();
    let f = net.forward_tape_with(
        Some(state),
        &mut tape,
        x,
        Mode::Quantized(Some(decision)),
        spec.unwrap_or_default(),
    )?;
    let l1 = tape.l1_distance(f.output, &teacher.output)?;
    let elems = match reduction {
        PixReduction::Sum => 1.0,
        PixReduction::Mean8 => teacher.output.numel() as f32 / 255.0,
    };
    let k = f.taps.len();
    let mut skt = None;
    for (tap, target) in f.taps.iter().zip(&teacher.taps) {
        let d = tape.normalized_l2_distance(*tap, target)?;
        skt = Some(match skt {
            None => d,
            Some(acc) => tape.add(acc, d)?,
        });
    }
    let n = batch as f32;
    let pix = tape.scale(l1, 1.0 / (n * elems));
    let loss = match skt {
        Some(s) => {
            let s = tape.scale(s, lambda_skt as f32 / (n * k as f32));
            tape.add(pix, s)?
        }
        None => pix,
    };
    let l1v = tape.value(l1).item() as f64 / elems as f64;
    let sktv = skt.map_or(0.0, |s| tape.value(s).item() as f64);
    let mut pass = StudentPass {
        l1: l1v,
        skt: sktv,
        bits: Vec::new(),
        wgt: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
    };
    if spec.is_some() && tape.value(loss).item().is_finite() {
        tape.backward(loss)?;
        let read = |vars: &[crate::autograd::Var]| {
            vars.iter()
                .map(|&v| tape.grad_scalar(v))
                .collect::<Vec<_>>()
        };
        pass.bits = read(&f.bits);
        pass.wgt = read(&f.wgt_bound);
        pass.lower = read(&f.act_lower);
        pass.upper = read(&f.act_upper);
    }
    Ok(pass)
}

fn sum_columns(rows: impl Iterator<Item = Vec<f32>>, width: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; width];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

fn check_finite(step: SubStep, name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: format!(
                "finetune sub-step {} ({}) {name}",
                step.index(),
                step.name()
            ),
            value: v,
        })
    }
}

fn project_ranges(state: &mut QuantState) {
    for p in &mut state.params {
        p.wgt.bound = p.wgt.bound.max(MIN_WGT_BOUND);
        // a NaN width also resets the range
        let width = p.act.upper - p.act.lower;
        if width.is_nan() || width < DEGENERATE_WIDTH {
            p.act.upper = p.act.lower + DEGENERATE_WIDTH;
        }
    }
}

fn mapping_snapshot(s: &QuantState) -> Vec<f32> {
    let mut v = vec![s.mapper.i2b.lower, s.mapper.i2b.upper];
    v.extend(s.mapper.l2b.factors.iter().map(|f| f.cont));
    v
}

fn range_snapshot(s: &QuantState) -> Vec<f32> {
    s.params
        .iter()
        .flat_map(|p| [p.act.lower, p.act.upper, p.wgt.bound])
        .collect()
}

/// Optimizer state for the three parameter groups.
#[derive(Debug, Clone)]
pub struct Finetuner<'a> {
    net: &'a SrNetwork,
    cfg: FinetuneConfig,
    b_tar: u32,
    opt_i2b: Adam,
    opt_bl: Adam,
    opt_wgt: Adam,
    opt_act: Adam,
}

impl<'a> Finetuner<'a> {
    pub fn new(net: &'a SrNetwork, state: &QuantState, cfg: FinetuneConfig) -> Result<Self> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let k = state.params.len();
        if k != net.num_quantized() {
            return Err(invalid(
                "finetune",
                format!(
                    "{k} quantizer entries for {} quantized layers",
                    net.num_quantized()
                ),
            ));
        }
        Ok(Finetuner {
            net,
            b_tar: cfg.b_tar.unwrap_or(net.config.b_base),
            cfg,
            opt_i2b: Adam::new(2),
            opt_bl: Adam::new(k),
            opt_wgt: Adam::new(k),
            opt_act: Adam::new(2 * k),
        })
    }

    pub fn config(&self) -> &FinetuneConfig {
        &self.cfg
    }

    /// Whether the bit-mapping sub-step has anything to learn.
    fn maps_bits(state: &QuantState) -> bool {
        state.mapper.magnitude > 0
    }

    /// Three sub-steps on one batch. `lr_scale` multiplies every base
    /// learning rate.
    pub fn step(
        &mut self,
        state: &mut QuantState,
        batch: &[Tensor],
        complexities: &[f32],
        lr_scale: f64,
    ) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Empty("finetune batch"));
        }
        if batch.len() != complexities.len() {
            return Err(invalid(
                "finetune",
                format!(
                    "{} images with {} complexity scores",
                    batch.len(),
                    complexities.len()
                ),
            ));
        }
        let net = self.net;
        let teachers: Vec<TeacherCache> = parallel::map(batch, |x| {
            net.forward_fp(x).map(|r| TeacherCache {
                output: r.output,
                taps: r.taps,
            })
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let mut reports = Vec::with_capacity(3);
        for sub in SubStep::ALL {
            if sub == SubStep::BitMapping && !Self::maps_bits(state) {
                continue;
            }
            let before_map = mapping_snapshot(state);
            let before_rng = range_snapshot(state);
            let rep = self.sub_step(sub, state, batch, complexities, &teachers, lr_scale)?;
            let map_same = mapping_snapshot(state) == before_map;
            let rng_same = range_snapshot(state) == before_rng;
            let violated = match sub {
                SubStep::BitMapping => !rng_same,
                _ => !map_same,
            };
            if violated {
                return Err(invalid(
                    "finetune",
                    format!("sub-step {} changed a frozen parameter group", sub.index()),
                ));
            }
            reports.push(rep);
        }
        let log: Vec<Vec<u32>> = complexities
            .iter()
            .map(|&c| state.decide_for(c).bits)
            .collect();
        Ok(StepReport {
            sub_steps: reports,
            fab: fab(&log)?,
        })
    }

    fn sub_step(
        &mut self,
        sub: SubStep,
        state: &mut QuantState,
        batch: &[Tensor],
        complexities: &[f32],
        teachers: &[TeacherCache],
        lr_scale: f64,
    ) -> Result<SubStepReport> {
        let n = batch.len();
        let k = state.params.len();
        let decisions: Vec<BitDecision> =
            complexities.iter().map(|&c| state.decide_for(c)).collect();
        let bit_log: Vec<Vec<u32>> = decisions.iter().map(|d| d.bits.clone()).collect();
        let mean_bits = fab(&bit_log)?;
        let l_bit = (mean_bits - self.b_tar as f64).max(0.0);

        let spec = match sub {
            SubStep::BitMapping if !self.cfg.bit_recon_grad => None,
            SubStep::BitMapping => Some(GradSpec {
                bits: true,
                ..Default::default()
            }),
            SubStep::WeightBounds => Some(GradSpec {
                wgt_bounds: true,
                ..Default::default()
            }),
            SubStep::ActRanges => Some(GradSpec {
                act_ranges: true,
                ..Default::default()
            }),
        };
        let net = self.net;
        let lambda_skt = self.cfg.lambda_skt;
        let reduction = self.cfg.pix_reduction;
        let frozen: &QuantState = state;
        let passes: Vec<StudentPass> = parallel::map_range(n, |j| {
            student_pass(
                net,
                frozen,
                &batch[j],
                &teachers[j],
                &decisions[j],
                spec,
                lambda_skt,
                reduction,
                n,
            )
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let l_pix = passes.iter().map(|p| p.l1).sum::<f64>() / n as f64;
        let l_skt = if k == 0 {
            0.0
        } else {
            passes.iter().map(|p| p.skt).sum::<f64>() / (n * k) as f64
        };
        let total = l_pix + self.cfg.lambda_skt * l_skt;
        check_finite(sub, "L_pix", l_pix)?;
        check_finite(sub, "L_skt", l_skt)?;
        check_finite(sub, "loss", total)?;

        let lr = match sub {
            SubStep::BitMapping => self.cfg.lr_bitfactor * lr_scale,
            SubStep::WeightBounds => self.cfg.lr_wgt * lr_scale,
            SubStep::ActRanges => self.cfg.lr_act * lr_scale,
        };
        let has_grads = spec.is_some();
        match sub {
            SubStep::BitMapping => {
                let m = state.mapper.magnitude as f32;
                let cs = self.cfg.complexity_scale as f32;
                let scaled = I2BMapper {
                    lower: state.mapper.i2b.lower * cs,
                    upper: state.mapper.i2b.upper * cs,
                };
                let hinge = if mean_bits > self.b_tar as f64 {
                    (self.cfg.lambda_bit / (n * k) as f64) as f32
                } else {
                    0.0
                };
                let adaptive: Vec<bool> = state.params.iter().map(|p| p.adaptive).collect();
                let mut g_bl = vec![0.0f64; k];
                let mut g_thr = 0.0f64;
                for (j, c) in complexities.iter().enumerate() {
                    let mut g_img = 0.0f64;
                    for l in 0..k {
                        if !adaptive[l] {
                            continue;
                        }
                        let rec = if has_grads { passes[j].bits[l] } else { 0.0 };
                        g_bl[l] += (rec + hinge) as f64;
                        let to_image = if self.cfg.i2b_bit_loss_grad {
                            rec + hinge
                        } else {
                            rec
                        };
                        g_img += to_image as f64;
                    }
                    let (sg, _) = i2b_surrogate_grad(&scaled, *c * cs);
                    g_thr += g_img * (m * sg) as f64;
                }
                for (name, g) in [("threshold gradient", g_thr)]
                    .into_iter()
                    .chain(g_bl.iter().map(|&g| ("bit factor gradient", g)))
                {
                    check_finite(sub, name, g)?;
                }
                let mut thr = [scaled.lower, scaled.upper];
                self.opt_i2b.step(
                    &mut thr,
                    &[g_thr as f32, g_thr as f32],
                    self.cfg.lr_i2b * lr_scale,
                );
                let before = state.mapper.i2b;
                state.mapper.i2b.lower = if thr[0] == scaled.lower {
                    before.lower
                } else {
                    thr[0] / cs
                };
                state.mapper.i2b.upper = if thr[1] == scaled.upper {
                    before.upper
                } else {
                    thr[1] / cs
                };
                state.mapper.i2b.project();

                let mut carriers: Vec<f32> =
                    state.mapper.l2b.factors.iter().map(|f| f.cont).collect();
                let g: Vec<f32> = g_bl.iter().map(|&v| v as f32).collect();
                self.opt_bl.step(&mut carriers, &g, lr);
                for (f, c) in state.mapper.l2b.factors.iter_mut().zip(carriers) {
                    f.cont = c;
                }
                let mag = state.mapper.magnitude;
                state.mapper.l2b.project(mag);
            }
            SubStep::WeightBounds => {
                let g = sum_columns(passes.into_iter().map(|p| p.wgt), k);
                for &v in &g {
                    check_finite(sub, "weight bound gradient", v as f64)?;
                }
                let mut bounds: Vec<f32> = state.params.iter().map(|p| p.wgt.bound).collect();
                self.opt_wgt.step(&mut bounds, &g, lr);
                for (p, b) in state.params.iter_mut().zip(bounds) {
                    p.wgt.bound = b;
                }
                project_ranges(state);
            }
            SubStep::ActRanges => {
                let mut lower = Vec::with_capacity(n);
                let mut upper = Vec::with_capacity(n);
                for p in passes {
                    lower.push(p.lower);
                    upper.push(p.upper);
                }
                let mut g = sum_columns(lower.into_iter(), k);
                g.extend(sum_columns(upper.into_iter(), k));
                for &v in &g {
                    check_finite(sub, "activation range gradient", v as f64)?;
                }
                let mut vals: Vec<f32> = state.params.iter().map(|p| p.act.lower).collect();
                vals.extend(state.params.iter().map(|p| p.act.upper));
                self.opt_act.step(&mut vals, &g, lr);
                for (i, p) in state.params.iter_mut().enumerate() {
                    p.act.lower = vals[i];
                    p.act.upper = vals[k + i];
                }
                project_ranges(state);
            }
        }
        Ok(SubStepReport {
            sub_step: sub,
            l_pix,
            l_skt,
            l_bit,
            fab: mean_bits,
            lr,
        })
    }
}

/// Calibration images with their complexity scores.
#[derive(Debug, Clone, Copy)]
pub struct CalibView<'a> {
    pub images: &'a [Tensor],
    pub complexities: &'a [f32],
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub state: QuantState,
    pub log: Vec<LogRecord>,
    pub epochs: Vec<EpochRecord>,
    pub iterations: usize,
}

/// Quantized-vs-FP PSNR on `probe`, averaged over images.
pub fn probe_psnr(
    net: &SrNetwork,
    state: &QuantState,
    probe: &[Tensor],
    fp_out: &[Tensor],
) -> Result<f64> {
    let vals: Vec<f64> = parallel::map_range(probe.len(), |i| -> Result<f64> {
        let c = crate::metrics::complexity(&probe[i])?;
        let d = state.decide_for(c);
        let mut tape = GradTape::new();
        let f = net.forward_tape_with(
            Some(state),
            &mut tape,
            &probe[i],
            Mode::Quantized(Some(&d)),
            GradSpec::default(),
        )?;
        psnr(tape.value(f.output), &fp_out[i])
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

/// Full fine-tuning phase. `on_record` sees every log line as it is
/// produced.
pub fn run_finetune(
    net: &SrNetwork,
    init: QuantState,
    calib: CalibView<'_>,
    cfg: &FinetuneConfig,
    probe: &[Tensor],
    mut on_record: impl FnMut(&LogRecord),
) -> Result<FinetuneOutcome> {
    if calib.images.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    if calib.images.len() != calib.complexities.len() {
        return Err(invalid(
            "run_finetune",
            "one complexity score per calibration image required",
        ));
    }
    let mut state = init;
    let mut tuner = Finetuner::new(net, &state, cfg.clone())?;
    let fp_probe: Vec<Tensor> = probe
        .iter()
        .map(|p| net.forward_fp(p).map(|r| r.output))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..calib.images.len()).collect();
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    let mut iter = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let scale = cfg.lr_scale(epoch);
        let mut pix_sum = 0.0;
        let mut pix_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Tensor> = chunk.iter().map(|&i| calib.images[i].clone()).collect();
            let cs: Vec<f32> = chunk.iter().map(|&i| calib.complexities[i]).collect();
            let rep = tuner.step(&mut state, &batch, &cs, scale)?;
            for s in &rep.sub_steps {
                let rec = LogRecord {
                    epoch,
                    iter,
                    sub_step: s.sub_step.index(),
                    l_pix: s.l_pix,
                    l_skt: s.l_skt,
                    l_bit: s.l_bit,
                    fab: s.fab,
                    lr: s.lr,
                };
                on_record(&rec);
                log.push(rec);
            }
            if let Some(last) = rep.sub_steps.last() {
                pix_sum += last.l_pix;
                pix_count += 1;
            }
            iter += 1;
        }
        let calib_log: Vec<Vec<u32>> = calib
            .complexities
            .iter()
            .map(|&c| state.decide_for(c).bits)
            .collect();
        let probe_psnr = if probe.is_empty() {
            None
        } else {
            Some(probe_psnr(net, &state, probe, &fp_probe)?)
        };
        let rec = EpochRecord {
            epoch,
            mean_l_pix: pix_sum / pix_count.max(1) as f64,
            calib_fab: fab(&calib_log)?,
            probe_psnr,
        };
        log::info!(
            "epoch {epoch}: L_pix {:.4} FAB {:.3} probe PSNR {:?}",
            rec.mean_l_pix,
            rec.calib_fab,
            rec.probe_psnr
        );
        epochs.push(rec);
    }
    Ok(FinetuneOutcome {
        state,
        log,
        epochs,
        iterations: iter,
    })
}
