//! A small EDSR-style super-resolution network: head conv, residual body,
//! pixel-shuffle tail. Quantizers sit on the input activation and the
//! weights of every in-scope convolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{GradTape, Var};
use crate::bitmapping::{clamp_bits, BitDecision, BitMapper};
use crate::error::{invalid, Error, Result};
use crate::quantizer::{ActQuant, WgtQuant};
use crate::tensor::{Shape, Tensor};

/// Which convolutions carry quantizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantScope {
    /// Residual-block convolutions only.
    BodyOnly,
    /// Every convolution; head and tail are held at a static 8 bits.
    Full,
}

impl QuantScope {
    pub fn code(self) -> u8 {
        match self {
            QuantScope::BodyOnly => 0,
            QuantScope::Full => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(QuantScope::BodyOnly),
            1 => Some(QuantScope::Full),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantScope::BodyOnly => "body_only",
            QuantScope::Full => "full",
        }
    }
}

/// Bits of head/tail quantizers in [`QuantScope::Full`].
pub const STATIC_EDGE_BITS: u32 = 8;

/// Fixed shift removed from the input; the output conv bias starts at it.
pub const PIXEL_MEAN: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrNetConfig {
    pub num_blocks: usize,
    pub channels: usize,
    pub scale: usize,
    pub scope: QuantScope,
    pub b_base: u32,
}

impl Default for SrNetConfig {
    fn default() -> Self {
        SrNetConfig {
            num_blocks: 4,
            channels: 16,
            scale: 2,
            scope: QuantScope::BodyOnly,
            b_base: 4,
        }
    }
}

impl SrNetConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.num_blocks == 0 {
            errs.push("network.num_blocks must be >= 1".into());
        }
        if self.channels == 0 {
            errs.push("network.channels must be >= 1".into());
        }
        if !matches!(self.scale, 2 | 4) {
            errs.push(format!("network.scale must be 2 or 4, got {}", self.scale));
        }
        if !(crate::quantizer::BIT_MIN..=crate::quantizer::BIT_MAX).contains(&self.b_base) {
            errs.push(format!(
                "network.b_base must be in [2, 8], got {}",
                self.b_base
            ));
        }
        errs
    }

    /// Number of convolutions: head, two per block, upsampler, output.
    pub fn conv_count(&self) -> usize {
        2 * self.num_blocks + 3
    }

    /// Conv indices that carry quantizers, in forward order.
    pub fn quantized_convs(&self) -> Vec<usize> {
        match self.scope {
            QuantScope::BodyOnly => (1..=2 * self.num_blocks).collect(),
            QuantScope::Full => (0..self.conv_count()).collect(),
        }
    }

    pub fn is_body(&self, conv: usize) -> bool {
        (1..=2 * self.num_blocks).contains(&conv)
    }
}

/// Per-layer quantizer state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub act: ActQuant,
    pub wgt: WgtQuant,
    /// Bits before adaptation; weights always use this.
    pub base_bits: u32,
    /// Whether image/layer factors apply to this layer's activations.
    pub adaptive: bool,
}

/// Quantizers and bit mapping attached to a network.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantState {
    pub params: Vec<QuantParams>,
    pub mapper: BitMapper,
}

impl QuantState {
    /// Bits for an image with the given factor; static layers ignore factors.
    pub fn decide(&self, image_factor: i32) -> BitDecision {
        let m = self.mapper.magnitude;
        let bits = self
            .params
            .iter()
            .enumerate()
            .map(|(k, p)| {
                if p.adaptive {
                    clamp_bits(p.base_bits as i32 + image_factor + self.mapper.l2b.factor(k, m))
                } else {
                    p.base_bits
                }
            })
            .collect();
        BitDecision { image_factor, bits }
    }

    pub fn decide_for(&self, complexity: f32) -> BitDecision {
        self.decide(self.mapper.image_factor(complexity))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    /// 1 x Cout x 1 x 1
    pub bias: Tensor,
}

impl ConvLayer {
    fn he(cin: usize, cout: usize, gain: f32, rng: &mut ChaCha8Rng) -> Self {
        let std = gain * (2.0 / (cin * 9) as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let data = (0..cout * cin * 9).map(|_| normal.sample(rng)).collect();
        ConvLayer {
            weight: Tensor::new(Shape::new(cout, cin, 3, 3), data).expect("sized"),
            bias: Tensor::zeros(Shape::new(1, cout, 1, 1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrNetwork {
    pub config: SrNetConfig,
    /// Head, body (two per block), upsampler, output.
    pub convs: Vec<ConvLayer>,
    pub quant: Option<QuantState>,
    pub frozen: bool,
}

/// Which parameters a tape forward should track gradients for.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradSpec {
    pub weights: bool,
    pub act_ranges: bool,
    pub wgt_bounds: bool,
    pub bits: bool,
}

pub enum Mode<'a> {
    Fp,
    Quantized(Option<&'a BitDecision>),
}

/// Handles into a tape produced by [`SrNetwork::forward_tape`]. Per-layer
/// vectors are indexed by quantized-layer position.
#[derive(Debug, Clone)]
pub struct TapeForward {
    pub output: Var,
    /// Output of each quantized conv (post-ReLU where one follows).
    pub taps: Vec<Var>,
    /// Input activation of each quantized conv, before quantization.
    pub inputs: Vec<Var>,
    /// (weight, bias) for every conv.
    pub weights: Vec<(Var, Var)>,
    pub act_lower: Vec<Var>,
    pub act_upper: Vec<Var>,
    pub wgt_bound: Vec<Var>,
    pub bits: Vec<Var>,
}

/// Output and per-layer activations of a tape-free forward.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub output: Tensor,
    pub taps: Vec<Tensor>,
    pub inputs: Vec<Tensor>,
}

impl SrNetwork {
    /// Seeded He-initialized network. The second conv of each residual block
    /// and the output conv start scaled down so the untrained network is
    /// close to a flat mid-grey output.
    pub fn new(config: SrNetConfig, seed: u64) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let mut convs = vec![ConvLayer::he(3, c, 1.0, &mut rng)];
        for _ in 0..config.num_blocks {
            convs.push(ConvLayer::he(c, c, 1.0, &mut rng));
            convs.push(ConvLayer::he(c, c, 0.1, &mut rng));
        }
        convs.push(ConvLayer::he(
            c,
            c * config.scale * config.scale,
            1.0,
            &mut rng,
        ));
        let mut out = ConvLayer::he(c, 3, 0.1, &mut rng);
        out.bias = Tensor::full(Shape::new(1, 3, 1, 1), PIXEL_MEAN);
        convs.push(out);
        Ok(SrNetwork {
            config,
            convs,
            quant: None,
            frozen: false,
        })
    }

    /// Number of quantized layers K.
    pub fn num_quantized(&self) -> usize {
        self.config.quantized_convs().len()
    }

    pub fn quant_state(&self) -> Result<&QuantState> {
        self.quant.as_ref().ok_or(Error::NotQuantized)
    }

    /// Little-endian bytes of every weight and bias, in conv order.
    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for c in &self.convs {
            for t in [&c.weight, &c.bias] {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Record a forward pass on `tape`. In quantized mode a bit decision is
    /// required and applies to every image of the batch.
    pub fn forward_tape(
        &self,
        tape: &mut GradTape,
        x: &Tensor,
        mode: Mode<'_>,
        grads: GradSpec,
    ) -> Result<TapeForward> {
        self.forward_tape_with(self.quant.as_ref(), tape, x, mode, grads)
    }

    /// [`SrNetwork::forward_tape`] with an externally held quantizer state,
    /// so that quantization parameters can be optimized while the network
    /// itself stays untouched.
    pub fn forward_tape_with(
        &self,
        state: Option<&QuantState>,
        tape: &mut GradTape,
        x: &Tensor,
        mode: Mode<'_>,
        grads: GradSpec,
    ) -> Result<TapeForward> {
        if x.shape().c() != 3 {
            return Err(invalid(
                "forward",
                format!("expected 3 channels, got {}", x.shape()),
            ));
        }
        let quant = match mode {
            Mode::Fp => None,
            Mode::Quantized(None) => return Err(Error::MissingBitDecision),
            Mode::Quantized(Some(d)) => {
                let st = state.ok_or(Error::NotQuantized)?;
                if d.bits.len() != st.params.len() {
                    return Err(invalid(
                        "forward",
                        format!(
                            "{} layer bits for {} quantized layers",
                            d.bits.len(),
                            st.params.len()
                        ),
                    ));
                }
                Some((st, d))
            }
        };

        let weights: Vec<(Var, Var)> = self
            .convs
            .iter()
            .map(|c| {
                (
                    tape.leaf(c.weight.clone(), grads.weights),
                    tape.leaf(c.bias.clone(), grads.weights),
                )
            })
            .collect();
        let qconvs = self.config.quantized_convs();
        let mut fwd = TapeForward {
            output: weights[0].0,
            taps: Vec::new(),
            inputs: Vec::new(),
            weights,
            act_lower: Vec::new(),
            act_upper: Vec::new(),
            wgt_bound: Vec::new(),
            bits: Vec::new(),
        };

        let input = tape.leaf(x.map(|v| v - PIXEL_MEAN), false);
        let conv =
            |tape: &mut GradTape, fwd: &mut TapeForward, idx: usize, inp: Var| -> Result<Var> {
                let (w, b) = fwd.weights[idx];
                let Some(k) = qconvs.iter().position(|&q| q == idx) else {
                    return tape.conv2d(inp, w, Some(b), 1, 1);
                };
                fwd.inputs.push(inp);
                let Some((st, d)) = quant else {
                    return tape.conv2d(inp, w, Some(b), 1, 1);
                };
                let p = st.params[k];
                let lo = tape.scalar(p.act.lower, grads.act_ranges);
                let hi = tape.scalar(p.act.upper, grads.act_ranges);
                let bits = tape.scalar(d.bits[k] as f32, grads.bits);
                let bound = tape.scalar(p.wgt.bound, grads.wgt_bounds);
                let wbits = tape.scalar(p.base_bits as f32, false);
                let xq = tape.quantize_act(inp, lo, hi, bits)?;
                let wq = tape.quantize_wgt(w, bound, wbits)?;
                fwd.act_lower.push(lo);
                fwd.act_upper.push(hi);
                fwd.bits.push(bits);
                fwd.wgt_bound.push(bound);
                tape.conv2d(xq, wq, Some(b), 1, 1)
            };

        let head = conv(tape, &mut fwd, 0, input)?;
        if qconvs.contains(&0) {
            fwd.taps.push(head);
        }
        let mut r = head;
        for blk in 0..self.config.num_blocks {
            let i1 = 1 + 2 * blk;
            let t = conv(tape, &mut fwd, i1, r)?;
            let t = tape.relu(t);
            fwd.taps.push(t);
            let t = conv(tape, &mut fwd, i1 + 1, t)?;
            fwd.taps.push(t);
            r = tape.add(r, t)?;
        }
        let body = tape.add(r, head)?;
        let up_idx = 2 * self.config.num_blocks + 1;
        let up = conv(tape, &mut fwd, up_idx, body)?;
        if qconvs.contains(&up_idx) {
            fwd.taps.push(up);
        }
        let up = tape.pixel_shuffle(up, self.config.scale)?;
        let out = conv(tape, &mut fwd, up_idx + 1, up)?;
        if qconvs.contains(&(up_idx + 1)) {
            fwd.taps.push(out);
        }
        fwd.output = out;
        Ok(fwd)
    }

    /// Forward without gradient tracking.
    pub fn forward(&self, x: &Tensor, mode: Mode<'_>) -> Result<ForwardResult> {
        let mut tape = GradTape::new();
        let f = self.forward_tape(&mut tape, x, mode, GradSpec::default())?;
        Ok(ForwardResult {
            output: tape.value(f.output).clone(),
            taps: f.taps.iter().map(|&v| tape.value(v).clone()).collect(),
            inputs: f.inputs.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    pub fn forward_fp(&self, x: &Tensor) -> Result<ForwardResult> {
        self.forward(x, Mode::Fp)
    }

    /// Quantized forward with the bits chosen from the image's complexity.
    pub fn forward_adaptive(&self, x: &Tensor) -> Result<(ForwardResult, BitDecision)> {
        let st = self.quant_state()?;
        let c = crate::metrics::complexity(x)?;
        let d = st.decide_for(c);
        Ok((self.forward(x, Mode::Quantized(Some(&d)))?, d))
    }
}

/// Settings of the FP pretraining run on synthetic pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// HR crop side; must be a multiple of the scale.
    pub hr_crop: usize,
    /// Number of synthetic HR images crops are drawn from.
    pub pool_size: usize,
    /// Side of each synthetic HR image.
    pub pool_image: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 8,
            hr_crop: 48,
            pool_size: 256,
            pool_image: 96,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, scale: usize) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("pretrain.batch_size must be >= 1".into());
        }
        if self.hr_crop == 0
            || !self.hr_crop.is_multiple_of(scale)
            || self.hr_crop > self.pool_image
        {
            errs.push(format!(
                "pretrain.hr_crop must be a positive multiple of {scale} no larger than pool_image"
            ));
        }
        if self.pool_size == 0 {
            errs.push("pretrain.pool_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("pretrain.lr must be > 0, got {}", self.lr));
        }
        errs
    }
}

fn crop(img: &Tensor, y: usize, x: usize, size: usize) -> Tensor {
    let c = img.shape().c();
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for yy in 0..size {
            for xx in 0..size {
                data.push(img.at(0, ch, y + yy, x + xx));
            }
        }
    }
    Tensor::new(Shape::new(1, c, size, size), data).expect("sized")
}

/// Train `net` in floating point with L1 loss against synthetic HR targets
/// and return it frozen. Returns the per-step mean absolute error.
pub fn pretrain_fp(net: &mut SrNetwork, cfg: &PretrainConfig) -> Result<Vec<f32>> {
    use rand::Rng;
    let scale = net.config.scale;
    let errs = cfg.validate(scale);
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if net.frozen {
        return Err(invalid("pretrain", "network is frozen"));
    }
    let pool = crate::datapipe::synth_pairs(cfg.pool_size, cfg.pool_image, scale, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de);
    let mut opts: Vec<(crate::optim::Adam, crate::optim::Adam)> = net
        .convs
        .iter()
        .map(|c| {
            (
                crate::optim::Adam::new(c.weight.numel()),
                crate::optim::Adam::new(c.bias.numel()),
            )
        })
        .collect();
    let lr_crop = cfg.hr_crop / scale;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut lrs = Vec::with_capacity(cfg.batch_size);
        let mut hrs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let p = &pool[rng.random_range(0..pool.len())];
            let lw = p.lr.shape().w();
            let lh = p.lr.shape().h();
            let y = rng.random_range(0..=lh - lr_crop);
            let x = rng.random_range(0..=lw - lr_crop);
            lrs.push(crop(&p.lr, y, x, lr_crop));
            hrs.push(crop(&p.hr, y * scale, x * scale, cfg.hr_crop));
        }
        let lr_batch = Tensor::stack(&lrs)?;
        let hr_batch = Tensor::stack(&hrs)?;
        let mut tape = GradTape::new();
        let spec = GradSpec {
            weights: true,
            ..Default::default()
        };
        let f = net.forward_tape_with(None, &mut tape, &lr_batch, Mode::Fp, spec)?;
        let l1 = tape.l1_distance(f.output, &hr_batch)?;
        let loss = tape.scale(l1, 1.0 / hr_batch.numel() as f32);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                stage: format!("pretrain step {step}"),
                value: value as f64,
            });
        }
        history.push(value);
        tape.backward(loss)?;
        for (i, conv) in net.convs.iter_mut().enumerate() {
            let (w, b) = f.weights[i];
            let gw = tape.grad(w).expect("weights track gradients").to_vec();
            let gb = tape.grad(b).expect("biases track gradients").to_vec();
            opts[i].0.step(conv.weight.data_mut(), &gw, cfg.lr);
            opts[i].1.step(conv.bias.data_mut(), &gb, cfg.lr);
        }
        if step % 200 == 0 {
            log::debug!("pretrain step {step}: L1 {value:.5}");
        }
    }
    net.frozen = true;
    Ok(history)
}
