//! Invariants of the activation and weight quantizers, checked against an
//! enumeration of every grid level. Shared by the property tests and the
//! acceptance run.

use adabm_core::quantizer::{
    quantize_act, quantize_act_scalar, quantize_wgt, quantize_wgt_scalar, ActQuant, BitValue,
    WgtQuant,
};
use adabm_core::{Shape, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

/// Every representable value of a b-bit activation grid.
fn act_levels(q: ActQuant, bits: u32) -> Vec<f64> {
    let n = (1u64 << bits) - 1;
    let s = (q.upper as f64 - q.lower as f64) / n as f64;
    (0..=n).map(|k| q.lower as f64 + k as f64 * s).collect()
}

/// Every representable value of a b-bit symmetric weight grid.
fn wgt_levels(q: WgtQuant, bits: u32) -> Vec<f64> {
    let n = (1i64 << (bits - 1)) - 1;
    let s = 2.0 * q.bound as f64 / (n as f64 * 2.0);
    (-n..=n).map(|k| k as f64 * s).collect()
}

/// Nearest level to `v` by exhaustive search. Returns the two closest levels
/// when `v` is within float noise of their midpoint.
fn nearest(levels: &[f64], v: f64) -> (f64, Option<f64>) {
    let mut sorted: Vec<(f64, f64)> = levels.iter().map(|&l| ((l - v).abs(), l)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let step = (levels[1] - levels[0]).abs();
    let tie = (sorted[1].0 - sorted[0].0).abs() < 1e-4 * step;
    (sorted[0].1, tie.then_some(sorted[1].1))
}

fn matches_level(got: f32, want: (f64, Option<f64>), step: f64) -> bool {
    let close = |l: f64| (got as f64 - l).abs() <= 1e-5 * step.max(1e-3) + 1e-6;
    close(want.0) || want.1.is_some_and(close)
}

pub fn act_case() -> impl Strategy<Value = (f32, f32, u32, Vec<f32>)> {
    (-5.0f32..5.0, 0.01f32..10.0, 2u32..=8).prop_flat_map(|(lower, width, bits)| {
        let lo = lower - width;
        let hi = lower + 2.0 * width;
        (
            Just(lower),
            Just(lower + width),
            Just(bits),
            prop::collection::vec(lo..hi, 64),
        )
    })
}

pub fn wgt_case() -> impl Strategy<Value = (f32, u32, Vec<f32>)> {
    (0.001f32..5.0, 2u32..=8).prop_flat_map(|(bound, bits)| {
        (
            Just(bound),
            Just(bits),
            prop::collection::vec(-2.0 * bound..2.0 * bound, 64),
        )
    })
}

pub fn activation_invariants(
    (lower, upper, bits, xs): (f32, f32, u32, Vec<f32>),
) -> Result<(), TestCaseError> {
    let q = ActQuant::new(lower, upper).unwrap();
    let s = q.step(bits) as f64;
    let levels = act_levels(q, bits);
    let mut outs = Vec::new();
    for &x in &xs {
        let y = quantize_act_scalar(x, q, bits);
        // idempotence
        prop_assert_eq!(quantize_act_scalar(y, q, bits), y);
        // error bound against the clipped input
        let c = x.clamp(lower, upper) as f64;
        prop_assert!(
            (y as f64 - c).abs() <= s / 2.0 + 1e-5 * s.max(1.0),
            "x={} y={} S={}",
            x,
            y,
            s
        );
        // enumeration oracle
        prop_assert!(matches_level(y, nearest(&levels, c), s), "x={} y={}", x, y);
        outs.push((x, y));
    }
    // monotonicity
    outs.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in outs.windows(2) {
        prop_assert!(w[0].1 <= w[1].1);
    }
    // level count over a dense sweep
    let sweep: Vec<u32> = (0..4096)
        .map(|i| lower - (upper - lower) + 3.0 * (upper - lower) * i as f32 / 4095.0)
        .map(|x| quantize_act_scalar(x, q, bits).to_bits())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    prop_assert!(sweep.len() <= 1 << bits);
    // the tensor form agrees with the scalar form
    let t = Tensor::new(Shape::new(1, 1, 1, xs.len()), xs.clone()).unwrap();
    let qt = quantize_act(&t, q, BitValue::fixed(bits)).unwrap();
    for (x, y) in xs.iter().zip(qt.data()) {
        prop_assert_eq!(*y, quantize_act_scalar(*x, q, bits));
    }
    Ok(())
}

pub fn weight_invariants((bound, bits, ws): (f32, u32, Vec<f32>)) -> Result<(), TestCaseError> {
    let q = WgtQuant::new(bound).unwrap();
    let s = q.step(bits) as f64;
    let levels = wgt_levels(q, bits);
    let mut outs = Vec::new();
    for &w in &ws {
        let y = quantize_wgt_scalar(w, q, bits);
        prop_assert_eq!(quantize_wgt_scalar(y, q, bits), y);
        let c = w.clamp(-bound, bound) as f64;
        prop_assert!((y as f64 - c).abs() <= s / 2.0 + 1e-5 * s.max(1.0));
        prop_assert!(matches_level(y, nearest(&levels, c), s), "w={} y={}", w, y);
        // symmetric grid
        prop_assert_eq!(quantize_wgt_scalar(-w, q, bits), -y);
        outs.push((w, y));
    }
    outs.sort_by(|a, b| a.0.total_cmp(&b.0));
    for p in outs.windows(2) {
        prop_assert!(p[0].1 <= p[1].1);
    }
    let distinct: std::collections::BTreeSet<u32> = (0..4096)
        .map(|i| -2.0 * bound + 4.0 * bound * i as f32 / 4095.0)
        .map(|w| (quantize_wgt_scalar(w, q, bits) + 0.0).to_bits())
        .collect();
    prop_assert!(distinct.len() < 1 << bits);
    let t = Tensor::new(Shape::new(1, 1, 1, ws.len()), ws.clone()).unwrap();
    let qt = quantize_wgt(&t, q, BitValue::fixed(bits)).unwrap();
    for (w, y) in ws.iter().zip(qt.data()) {
        prop_assert_eq!(*y, quantize_wgt_scalar(*w, q, bits));
    }
    Ok(())
}

pub fn effective_bits(cont: f32) -> Result<(), TestCaseError> {
    let e = BitValue::new(cont).effective();
    prop_assert!((2..=8).contains(&e));
    if (2.0..=8.0).contains(&cont.round()) {
        prop_assert_eq!(e as f32, cont.round());
    }
    Ok(())
}

/// Fixed grid examples worked out by hand.
pub fn examples() -> Result<(), String> {
    let q = ActQuant::new(0.0, 1.0).unwrap();
    // 2 bits over [0, 1]: levels 0, 1/3, 2/3, 1
    let checks = [
        quantize_act_scalar(0.2, q, 2) == 1.0 / 3.0,
        quantize_act_scalar(-3.0, q, 2) == 0.0,
        quantize_act_scalar(9.0, q, 2) == 1.0,
    ];
    let w = WgtQuant::new(1.0).unwrap();
    // 3 bits: step 2/6, levels -1..1 in thirds
    let more = [
        (quantize_wgt_scalar(0.3, w, 3) - 1.0 / 3.0).abs() < 1e-7,
        quantize_wgt_scalar(5.0, w, 3) == 1.0,
        ActQuant::new(1.0, 1.0).is_err(),
        WgtQuant::new(0.0).is_err(),
    ];
    match checks.iter().chain(&more).position(|ok| !ok) {
        None => Ok(()),
        Some(i) => Err(format!("hand example {i} failed")),
    }
}

/// Runs every property with `cases` random cases each under a fixed seed.
pub fn run(cases: u32) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(
        config.clone(),
        proptest::test_runner::TestRng::deterministic_rng(config.rng_algorithm),
    );
    runner
        .run(&act_case(), activation_invariants)
        .map_err(|e| format!("activation: {e}"))?;
    runner
        .run(&wgt_case(), weight_invariants)
        .map_err(|e| format!("weights: {e}"))?;
    runner
        .run(&(-20.0f32..20.0), effective_bits)
        .map_err(|e| format!("effective bits: {e}"))?;
    examples()
}
