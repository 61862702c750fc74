//! Integer and float convolution against naive direct-summation oracles.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use supergnet_core::engine::{
    conv3x3_float, conv3x3_int, maxpool2x2, ConvLayer, Layer, NetworkGraph, RunMode, RunOutput,
};
use supergnet_core::gnetfc::calibrate_and_quantize;
use supergnet_core::qtensor::{
    quantize_activations, quantize_weights_3bit, FloatTensor, QuantActivations, QuantWeights,
    WeightBits,
};

/// Quadruple loop over (co, oy, ox) and (ci, ky, kx) with an i64 accumulator.
#[allow(clippy::too_many_arguments)]
fn int_oracle(
    x: &[u8],
    (c_in, h, w): (usize, usize, usize),
    x_scale: f32,
    codes: &[i8],
    scales: &[f32],
    bias: &[i32],
    pad: usize,
    relu: bool,
    out_scale: f32,
) -> Vec<u8> {
    let c_out = scales.len();
    let (oh, ow) = (h + 2 * pad - 2, w + 2 * pad - 2);
    let mut out = Vec::new();
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[co] as i64;
                for ci in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = oy as i64 + ky as i64 - pad as i64;
                            let ix = ox as i64 + kx as i64 - pad as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            let xv = x[(ci * h + iy as usize) * w + ix as usize] as i64;
                            let wv = codes[((co * c_in + ci) * 3 + ky) * 3 + kx] as i64;
                            acc += xv * wv;
                        }
                    }
                }
                assert!(acc.abs() < i32::MAX as i64);
                let mut r = acc as f64 * (x_scale as f64 * scales[co] as f64);
                if relu && r < 0.0 {
                    r = 0.0;
                }
                let q = r / out_scale as f64;
                let rounded = if q >= 0.0 { (q + 0.5).floor() } else { (q - 0.5).ceil() };
                out.push(rounded.clamp(0.0, 31.0) as u8);
            }
        }
    }
    out
}

fn random_weights(rng: &mut ChaCha8Rng, bits: WeightBits, c_out: usize, c_in: usize) -> QuantWeights {
    let n = c_out * c_in * 9;
    let codes: Vec<i8> = (0..n)
        .map(|_| match bits {
            WeightBits::One => {
                if rng.gen::<bool>() {
                    1
                } else {
                    -1
                }
            }
            WeightBits::Three => rng.gen_range(-3..=3),
        })
        .collect();
    let scales = (0..c_out).map(|_| rng.gen_range(0.01f32..2.0)).collect();
    let bias = (0..c_out).map(|_| rng.gen_range(-200..200)).collect();
    QuantWeights::new(bits, c_out, c_in, codes, scales, bias).unwrap()
}

#[test]
fn int_conv_matches_quadruple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..300 {
        let c_in = rng.gen_range(1..=8);
        let c_out = rng.gen_range(1..=8);
        let h = rng.gen_range(1..=12);
        let w = rng.gen_range(1..=12);
        let pad = if h < 3 || w < 3 { 1 } else { rng.gen_range(0..=1) };
        let bits = if rng.gen() { WeightBits::One } else { WeightBits::Three };
        let relu = rng.gen();
        let xs: Vec<u8> = (0..c_in * h * w).map(|_| rng.gen_range(0..=31)).collect();
        let x_scale = rng.gen_range(0.01f32..1.0);
        let x = QuantActivations::new((c_in, h, w), xs.clone(), x_scale).unwrap();
        let wq = random_weights(&mut rng, bits, c_out, c_in);
        let out_scale = rng.gen_range(0.05f32..4.0);
        let got = conv3x3_int(&x, &wq, pad, relu, out_scale).unwrap();
        let want = int_oracle(&xs, (c_in, h, w), x_scale, wq.codes(), wq.scales(), wq.bias(), pad, relu, out_scale);
        assert_eq!(got.codes(), &want[..]);
    }
}

#[test]
fn one_bit_small_instance() {
    // 1×5×5 input, two 1-bit output channels
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xs: Vec<u8> = (0..25).map(|_| rng.gen_range(0..=31)).collect();
    let x = QuantActivations::new((1, 5, 5), xs.clone(), 0.5).unwrap();
    let wq = random_weights(&mut rng, WeightBits::One, 2, 1);
    for pad in [0, 1] {
        let got = conv3x3_int(&x, &wq, pad, true, 1.0).unwrap();
        let want = int_oracle(&xs, (1, 5, 5), 0.5, wq.codes(), wq.scales(), wq.bias(), pad, true, 1.0);
        assert_eq!(got.codes(), &want[..]);
    }
}

#[allow(clippy::needless_range_loop)]
fn float_oracle(x: &FloatTensor, w: &FloatTensor, bias: &[f32], pad: usize) -> Vec<f64> {
    let (c_in, h, wd) = x.chw().unwrap();
    let c_out = w.shape()[0];
    let (oh, ow) = (h + 2 * pad - 2, wd + 2 * pad - 2);
    let mut out = Vec::new();
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[co] as f64;
                for ci in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = oy as isize + ky as isize - pad as isize;
                            let ix = ox as isize + kx as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += x.data()[(ci * h + iy as usize) * wd + ix as usize] as f64
                                    * w.data()[((co * c_in + ci) * 3 + ky) * 3 + kx] as f64;
                            }
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> FloatTensor {
    let n = shape.iter().product();
    FloatTensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

#[test]
fn float_conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (c_in, c_out) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let (h, w) = (rng.gen_range(3..=10), rng.gen_range(3..=10));
        let pad = rng.gen_range(0..=1);
        let x = random_tensor(&mut rng, &[c_in, h, w], -2.0, 2.0);
        let wt = random_tensor(&mut rng, &[c_out, c_in, 3, 3], -1.0, 1.0);
        let bias: Vec<f32> = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = conv3x3_float(&x, &wt, &bias, pad, false).unwrap();
        let want = float_oracle(&x, &wt, &bias, pad);
        // operand scale: the largest possible |output|
        let operand = 9.0 * c_in as f64 * 2.0 + 1.0;
        for (g, o) in got.data().iter().zip(&want) {
            assert!((*g as f64 - o).abs() <= 1e-6 * operand, "{g} vs {o}");
        }
    }
}

proptest! {
    #[test]
    fn maxpool_commutes_with_dequantization(
        c in 1usize..3, hh in 1usize..8, ww in 1usize..8,
        seed in any::<u64>(), scale in 0.01f32..10.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (2 * hh, 2 * ww);
        let codes: Vec<u8> = (0..c * h * w).map(|_| rng.gen_range(0..=31)).collect();
        let x = QuantActivations::new((c, h, w), codes, scale).unwrap();
        let a = maxpool2x2(&x).unwrap().dequantize();
        let b = maxpool2x2(&x.dequantize()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn int_engine_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = QuantActivations::new(
            (3, 6, 6),
            (0..108).map(|_| rng.gen_range(0..=31)).collect(),
            0.3,
        ).unwrap();
        let w = random_weights(&mut rng, WeightBits::Three, 4, 3);
        let a = conv3x3_int(&x, &w, 1, true, 0.7).unwrap();
        let b = conv3x3_int(&x, &w, 1, true, 0.7).unwrap();
        prop_assert_eq!(a, b);
    }
}

/// Per-element error of one 3-bit/5-bit conv against the float conv of the
/// original operands stays under
/// 9·C_in·(x_max·Δw/2 + w_max·Δx/2 + Δw·Δx/4) plus the output rounding step.
#[test]
fn quantized_conv_error_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..50 {
        let c_in = rng.gen_range(1..=6);
        let c_out = rng.gen_range(1..=4);
        let x_scale = rng.gen_range(0.05f32..0.5);
        let x = random_tensor(&mut rng, &[c_in, 6, 6], 0.0, 31.0 * x_scale);
        let wt = random_tensor(&mut rng, &[c_out, c_in, 3, 3], -1.0, 1.0);
        let qx = quantize_activations(&x, x_scale).unwrap();
        let qw = quantize_weights_3bit(&wt).unwrap();
        let reference = conv3x3_float(&x, &wt, &vec![0.0; c_out], 1, false).unwrap();
        let x_max = x.max_abs() as f64;
        // compare the pre-requantization real values
        let scores = supergnet_core::engine::conv3x3_int_scores(&qx, &qw, 1, false).unwrap();
        let per = 36;
        for co in 0..c_out {
            let dw = qw.scales()[co] as f64;
            let w_max = wt.data()[co * c_in * 9..(co + 1) * c_in * 9]
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs() as f64));
            let dx = x_scale as f64;
            let bound = 9.0 * c_in as f64 * (x_max * dw / 2.0 + w_max * dx / 2.0 + dw * dx / 4.0);
            for i in 0..per {
                let e = (scores.data()[co * per + i] as f64 - reference.data()[co * per + i] as f64).abs();
                assert!(e <= bound + 1e-5, "error {e} exceeds bound {bound}");
            }
        }
    }
}

fn random_three_layer_graph(rng: &mut ChaCha8Rng) -> NetworkGraph {
    let mut g = NetworkGraph::new((1, 16, 16), 1.0);
    let layer = |rng: &mut ChaCha8Rng, ci: usize, co: usize, pad: usize, relu: bool| {
        let w = random_tensor(rng, &[co, ci, 3, 3], -1.0, 1.0);
        Layer::Conv(ConvLayer::new(ci, co, pad, relu, WeightBits::Three).with_float(w, vec![0.0; co]))
    };
    // 16 -> 16 -> 8 -> 6 -> 3 -> 1
    g.push(layer(rng, 1, 8, 1, true));
    g.push(Layer::MaxPool);
    g.push(layer(rng, 8, 8, 0, true));
    g.push(Layer::MaxPool);
    g.push(layer(rng, 8, 4, 0, false));
    g
}

fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Float vs integer argmax agreement over the 4 output scores of one fixed
/// random instance (seed 0). Agreement varies strongly between random
/// instances because untrained nets often produce near-tied scores; the 0.95
/// bound is a regression bound for this instance only.
#[test]
fn float_and_int_argmax_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = random_three_layer_graph(&mut rng);
    let inputs: Vec<FloatTensor> = (0..200)
        .map(|_| random_tensor(&mut rng, &[1, 16, 16], 0.0, 31.0))
        .collect();
    calibrate_and_quantize(&mut g, &inputs).unwrap();
    let mut agree = 0;
    for x in &inputs {
        let (f, _) = g.run(x, RunMode::Float).unwrap();
        let (i, _) = g.run(x, RunMode::Int).unwrap();
        assert_eq!(i.shape(), (4, 1, 1));
        assert!(matches!(i, RunOutput::Real(_)));
        if argmax(f.to_float().data()) == argmax(i.to_float().data()) {
            agree += 1;
        }
    }
    let rate = agree as f64 / inputs.len() as f64;
    eprintln!("float/int argmax agreement {rate}");
    assert!(rate >= 0.95, "agreement {rate}");
}

/// Calibrated scales never saturate on their own calibration set except at
/// the maximum-achieving element.
#[test]
fn calibration_avoids_saturation() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let g0 = random_three_layer_graph(&mut rng);
        let inputs: Vec<FloatTensor> = (0..10)
            .map(|_| random_tensor(&mut rng, &[1, 16, 16], 0.0, 31.0))
            .collect();
        let scales = supergnet_core::gnetfc::calibrate_scales(&g0, &inputs).unwrap();
        let convs: Vec<usize> = g0
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv(_)))
            .map(|(i, _)| i)
            .collect();
        let mut overflow = 0usize;
        let mut at_max = 0usize;
        for x in &inputs {
            g0.run_float_observed(x, &|| 0, &mut |i, y| {
                if let Some(k) = convs.iter().position(|&c| c == i) {
                    let s = scales[k];
                    for &v in y.data() {
                        let q = (v / s) as f64;
                        if q > 31.0 + 1e-4 {
                            overflow += 1;
                        }
                        if (q - 31.0).abs() <= 1e-4 {
                            at_max += 1;
                        }
                    }
                }
            })
            .unwrap();
        }
        assert_eq!(overflow, 0);
        assert!(at_max >= convs.len());
    }
}
