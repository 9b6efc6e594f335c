//! Pipeline-level checks shared by the integration tests and the acceptance
//! run: a reduced configuration and a static reference forward assembled
//! from the tensor primitives.

use adabm_core::config::RunConfig;
use adabm_core::datapipe::synth_probe_set;
use adabm_core::pipeline::{evaluate, infer, quantize, EvalItem};
use adabm_core::quantizer::{quantize_act, quantize_wgt, BitValue};
use adabm_core::srnet::{SrNetwork, PIXEL_MEAN};
use adabm_core::tensor::{add, conv2d, pixel_shuffle, relu};
use adabm_core::{Result, Tensor};

/// A configuration small enough for a full pipeline run in a few seconds.
pub fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.pretrain.steps = 40;
    cfg.pretrain.pool_size = 16;
    cfg.pretrain.pool_image = 48;
    cfg.pretrain.hr_crop = 24;
    cfg.pretrain.batch_size = 4;
    cfg.data.calib_count = 12;
    cfg.data.synth_pool = 24;
    cfg.data.synth_size = 24;
    cfg.data.patch = 16;
    cfg.data.probe_count = 2;
    cfg.finetune.epochs = 2;
    cfg.finetune.batch_size = 4;
    cfg.set_seed(seed);
    cfg
}

/// Quantized forward with every quantized layer at its base bits, built
/// directly from conv, ReLU, add and pixel shuffle.
pub fn static_forward(net: &SrNetwork, x: &Tensor) -> Result<Tensor> {
    let st = net.quant_state()?;
    let qconvs = net.config.quantized_convs();
    let conv = |idx: usize, inp: &Tensor| -> Result<Tensor> {
        let layer = &net.convs[idx];
        let bias = Some(layer.bias.data());
        match qconvs.iter().position(|&q| q == idx) {
            None => conv2d(inp, &layer.weight, bias, 1, 1),
            Some(k) => {
                let p = st.params[k];
                let bits = BitValue::fixed(p.base_bits);
                let xq = quantize_act(inp, p.act, bits)?;
                let wq = quantize_wgt(&layer.weight, p.wgt, bits)?;
                conv2d(&xq, &wq, bias, 1, 1)
            }
        }
    };
    let input = x.map(|v| v - PIXEL_MEAN);
    let head = conv(0, &input)?;
    let mut r = head.clone();
    for blk in 0..net.config.num_blocks {
        let t = relu(&conv(1 + 2 * blk, &r)?);
        let t = conv(2 + 2 * blk, &t)?;
        r = add(&r, &t)?;
    }
    let body = add(&r, &head)?;
    let up_idx = 2 * net.config.num_blocks + 1;
    let up = pixel_shuffle(&conv(up_idx, &body)?, net.config.scale)?;
    conv(up_idx + 1, &up)
}

#[derive(Debug, Clone)]
pub struct StaticCheck {
    pub images: usize,
    /// Images whose output differs from the static reference in any bit.
    pub mismatched: Vec<String>,
    /// Distinct per-image FAB values of the evaluation rows.
    pub eval_fab: Vec<f64>,
    /// FAB over the calibration set reported by the quantize stage.
    pub calib_fab: f64,
    pub nonzero_image_factors: usize,
}

impl StaticCheck {
    pub fn passed(&self, b_base: u32) -> bool {
        self.mismatched.is_empty()
            && self.eval_fab == [b_base as f64]
            && self.calib_fab == b_base as f64
            && self.nonzero_image_factors == 0
    }
}

/// Runs the quantize stage with `cfg` and compares adaptive inference on
/// a spread of synthetic images with the static reference.
pub fn static_reduction(fp: &SrNetwork, cfg: &RunConfig) -> Result<StaticCheck> {
    let out = quantize(fp, cfg)?;
    let scale = cfg.network.scale;
    let mut items: Vec<EvalItem> = synth_probe_set(2, 16 * scale, scale, cfg.seed + 100)
        .into_iter()
        .map(|p| EvalItem {
            name: p.id,
            lr: p.lr,
            hr: Some(p.hr),
        })
        .collect();
    for (i, patch) in out.calib.patches().into_iter().take(4).enumerate() {
        items.push(EvalItem {
            name: format!("calib{i}"),
            lr: patch,
            hr: None,
        });
    }
    let mut mismatched = Vec::new();
    for it in &items {
        let got = infer(&out.net, &it.lr)?;
        let want = static_forward(&out.net, &it.lr)?;
        let same = got.shape() == want.shape()
            && got
                .data()
                .iter()
                .zip(want.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            mismatched.push(it.name.clone());
        }
    }
    let rows = evaluate(&out.net, &items)?;
    let per_image = &rows[..rows.len() - 1];
    let mut eval_fab: Vec<f64> = per_image.iter().map(|r| r.fab).collect();
    eval_fab.sort_by(f64::total_cmp);
    eval_fab.dedup();
    Ok(StaticCheck {
        images: items.len(),
        mismatched,
        eval_fab,
        calib_fab: out.fab,
        nonzero_image_factors: per_image.iter().filter(|r| r.b_i != 0.0).count(),
    })
}
