//! Library functions against independent scalar references.

mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use monofuse::decoder::{Decoder, DecoderConfig, IterationState};
use monofuse::fusion::{channel_attention, sgfm, spatial_attention};
use monofuse::losses::{geometric_loss, semantic_loss, LossConfig};
use monofuse::metrics::{average_precision, map50};
use monofuse::nn::ParamStore;
use rand::Rng;

#[test]
fn fusion_matches_scalar_oracles() {
    let (cam, sam, fused) = fusion_oracle_errors(0..100);
    assert!(cam < 1e-9, "channel attention deviates by {cam}");
    assert!(sam < 1e-9, "spatial attention deviates by {sam}");
    assert!(fused < 1e-9, "sgfm deviates by {fused}");
}

#[test]
fn spatial_attention_matches_sliding_window_on_wider_maps() {
    for seed in 0..10 {
        let mut r = rng(1000 + seed);
        let (c, h, w) = (5, 9, 6);
        let f = uniform(&mut r, c * h * w, -1.0, 1.0);
        let p = RawAttention::random(&mut r, c, 0.5);
        let got = values(&spatial_attention(&tensor(&f, &[1, c, h, w]), &p.to_params()).unwrap());
        let want = p.sam(&f, h, w);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_attention_parameters_quarter_the_features() {
    let mut r = rng(5);
    let (c, h, w) = (4, 5, 5);
    let fd = uniform(&mut r, 2 * c * h * w, -3.0, 3.0);
    let fs = uniform(&mut r, 2 * c * h * w, -3.0, 3.0);
    let p = RawAttention::zeros(c).to_params();
    let (td, ts) = (tensor(&fd, &[2, c, h, w]), tensor(&fs, &[2, c, h, w]));
    let (od, os) = sgfm(&td, &ts, &p, &p).unwrap();
    for (o, f) in [(values(&od), &fd), (values(&os), &fs)] {
        for (a, b) in o.iter().zip(f.iter()) {
            assert_eq!(*a, 0.25 * b);
        }
    }
}

/// Features lie in [-3, 3] with unit-scale parameters, which keeps every
/// attention logit inside the range where `1 / (1 + exp(-x))` is
/// representable strictly below 1 (|x| < 36).
#[test]
fn attention_is_a_contraction() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let (c, h, w) = (3, 4, 5);
        let fd = uniform(&mut r, c * h * w, -3.0, 3.0);
        let fs = uniform(&mut r, c * h * w, -3.0, 3.0);
        let pd = RawAttention::random(&mut r, c, 1.0).to_params();
        let ps = RawAttention::random(&mut r, c, 1.0).to_params();
        let (td, ts) = (tensor(&fd, &[1, c, h, w]), tensor(&fs, &[1, c, h, w]));
        for a in values(&channel_attention(&td, &pd).unwrap())
            .into_iter()
            .chain(values(&spatial_attention(&ts, &ps).unwrap()))
        {
            assert!(a > 0.0 && a < 1.0, "{a}");
        }
        let (od, os) = sgfm(&td, &ts, &pd, &ps).unwrap();
        for (o, f) in [(values(&od), &fd), (values(&os), &fs)] {
            for (a, b) in o.iter().zip(f.iter()) {
                assert!(a.abs() <= b.abs());
            }
        }
    }
}

#[test]
fn gate_matches_pointwise_conv_relu() {
    let c = 4;
    let cfg = DecoderConfig {
        channels: c,
        ..DecoderConfig::default()
    };
    let mut store = ParamStore::new(DType::F64, Device::Cpu);
    let decoder = Decoder::new(&mut store.builder(0), &cfg).unwrap();
    let mut r = rng(11);
    let mut raw = Vec::new();
    for branch in ["depth", "seg"] {
        for level in 0..4 {
            let w = uniform(&mut r, c * c, -1.0, 1.0);
            let b = uniform(&mut r, c, -0.5, 0.5);
            let name = format!("gate.{branch}.{level}");
            store
                .set(&format!("{name}.weight"), &tensor(&w, &[c, c, 1, 1]))
                .unwrap();
            store
                .set(&format!("{name}.bias"), &tensor(&b, &[c]))
                .unwrap();
            raw.push((w, b));
        }
    }
    let sizes = [8, 4, 2, 1];
    let feats: Vec<Vec<f64>> = (0..8)
        .map(|i| uniform(&mut r, c * sizes[i % 4] * sizes[i % 4], -2.0, 2.0))
        .collect();
    let t = |i: usize| tensor(&feats[i], &[1, c, sizes[i % 4], sizes[i % 4]]);
    let state = IterationState {
        features: [[t(0), t(1), t(2), t(3)], [t(4), t(5), t(6), t(7)]],
        iteration_index: 1,
    };
    let gated = decoder.gate(&state).unwrap();
    for bi in 0..2 {
        for l in 0..4 {
            let (w, b) = &raw[bi * 4 + l];
            let hw = sizes[l] * sizes[l];
            let x = &feats[bi * 4 + l];
            let got = values(&gated[bi][l]);
            for o in 0..c {
                for p in 0..hw {
                    let s: f64 = (0..c).map(|i| w[o * c + i] * x[i * hw + p]).sum::<f64>() + b[o];
                    assert!((got[o * hw + p] - s.max(0.0)).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn geometric_loss_matches_loop_oracle() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(2..7), r.random_range(2..7));
        let d = uniform(&mut r, h * w, 0.0, 1.0);
        let t = uniform(&mut r, h * w, 0.0, 1.0);
        let cfg = LossConfig {
            w_d: r.random_range(0.0..2.0),
            w_g: r.random_range(0.0..2.0),
            w_n: r.random_range(0.0..2.0),
            ..LossConfig::default()
        };
        let got = scalar(
            &geometric_loss(&tensor(&d, &[1, h, w]), &tensor(&t, &[1, h, w]), &cfg).unwrap(),
        );
        let want = geometric_oracle(&d, &t, h, w, (cfg.w_d, cfg.w_g, cfg.w_n));
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn semantic_loss_matches_log_softmax_oracle() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let k = r.random_range(2..5);
        let logits = uniform(&mut r, k * 4, -4.0, 4.0);
        let target: Vec<u32> = (0..4).map(|_| r.random_range(0..k as u32)).collect();
        let tt = Tensor::from_vec(target.clone(), (1, 2, 2), &Device::Cpu).unwrap();
        let got = scalar(&semantic_loss(&tensor(&logits, &[1, k, 2, 2]), &tt).unwrap());
        let want = cross_entropy_oracle(&logits, &target, k);
        assert!((got - want).abs() < 1e-9);
    }
}

#[test]
fn uniform_two_class_logits_cost_ln2() {
    let tt = Tensor::from_vec(vec![0u32, 1, 1, 0], (1, 2, 2), &Device::Cpu).unwrap();
    let l = scalar(
        &semantic_loss(
            &Tensor::zeros((1, 2, 2, 2), DType::F64, &Device::Cpu).unwrap(),
            &tt,
        )
        .unwrap(),
    );
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let (geo, sem) = loss_gradient_errors(0..5);
    for (name, e) in ["value", "gradient", "normal", "total"].iter().zip(geo) {
        assert!(e < 1e-4, "{name} term relative error {e}");
    }
    assert!(sem < 1e-4, "cross-entropy relative error {sem}");
}

#[test]
fn sgfm_gradients_match_finite_differences() {
    let e = sgfm_gradient_error(0..5);
    assert!(e < 1e-4, "relative error {e}");
}

#[test]
fn metrics_match_naive_references() {
    let (depth, iou, map, defined) = metric_oracle_errors(0..100);
    assert!(depth < 1e-9, "depth metrics deviate by {depth}");
    assert!(iou < 1e-9, "iou deviates by {iou}");
    assert!(map < 1e-9, "map50 deviates by {map}");
    assert!(defined > 50);
}

#[test]
fn ranked_pr_example_gives_full_ap() {
    assert_eq!(ranked_example_map(), 100.0);
    assert_eq!(
        average_precision(&[true, false], 1),
        ap_oracle(&[true, false], 1)
    );
}

#[test]
fn average_precision_matches_envelope_oracle() {
    for seed in 0..200 {
        let mut r = rng(seed);
        let n = r.random_range(0..12);
        let flags: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        let tp = flags.iter().filter(|&&f| f).count();
        let num_gt = tp + r.random_range(0..4);
        let a = average_precision(&flags, num_gt);
        assert!(
            (a - ap_oracle(&flags, num_gt)).abs() < 1e-12,
            "{flags:?} / {num_gt}"
        );
    }
}

#[test]
fn map50_exact_and_disjoint_cases() {
    let (h, w) = (4, 4);
    let mut gt = vec![0u8; 16];
    gt[5] = 1;
    gt[6] = 1;
    let mut prob = vec![0.0; 32];
    for p in 0..16 {
        prob[16 + p] = if gt[p] == 1 { 0.8 } else { 0.1 };
        prob[p] = 1.0 - prob[16 + p];
    }
    assert_eq!(map50(&prob, &gt, h, w, 2).unwrap(), Some(100.0));
    let mut far = vec![0.0; 32];
    for p in 0..16 {
        far[16 + p] = if p == 15 { 0.9 } else { 0.1 };
        far[p] = 1.0 - far[16 + p];
    }
    assert_eq!(map50(&far, &gt, h, w, 2).unwrap(), Some(0.0));
}
