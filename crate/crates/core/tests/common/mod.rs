//! Reference implementations and random inputs shared by the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use rsknet::kernels::conv::{conv2d, ConvSpec};
use rsknet::scoring::DcfParams;
use rsknet::Tensor3;

/// Nested-loop convolution with the same-padding rule written out.
pub fn conv_oracle(x: &Tensor3<f64>, spec: &ConvSpec, w: &[f64]) -> Tensor3<f64> {
    let (t, f, _) = x.dims();
    let (ot, of) = (t.div_ceil(spec.stride), f.div_ceil(spec.stride));
    let span_h = spec.dilation * (spec.kernel_h - 1) + 1;
    let span_w = spec.dilation * (spec.kernel_w - 1) + 1;
    let pad_t = (((ot - 1) * spec.stride + span_h).saturating_sub(t) / 2) as isize;
    let pad_f = (((of - 1) * spec.stride + span_w).saturating_sub(f) / 2) as isize;
    let ipg = spec.in_ch / spec.groups;
    let opg = spec.out_ch / spec.groups;
    Tensor3::from_fn(ot, of, spec.out_ch, |a, b, co| {
        let g = co / opg;
        let mut acc = 0.0;
        for i in 0..spec.kernel_h {
            for j in 0..spec.kernel_w {
                let ti = (a * spec.stride + i * spec.dilation) as isize - pad_t;
                let fj = (b * spec.stride + j * spec.dilation) as isize - pad_f;
                if ti < 0 || fj < 0 || ti >= t as isize || fj >= f as isize {
                    continue;
                }
                for l in 0..ipg {
                    let ci = g * ipg + l;
                    acc += x.get(ti as usize, fj as usize, ci) * w[spec.weight_index(i, j, ci, co)];
                }
            }
        }
        acc
    })
}

/// Largest elementwise gap between the fast convolution and the oracle,
/// relative to `1 + |oracle|`.
pub fn conv_gap(t: usize, f: usize, spec: &ConvSpec, rng: &mut ChaCha8Rng) -> f64 {
    let x = Tensor3::from_fn(t, f, spec.in_ch, |_, _, _| rng.random_range(-1.0..1.0));
    let w: Vec<f64> = (0..spec.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fast = conv2d(&x, spec, &w).unwrap();
    let slow = conv_oracle(&x, spec, &w);
    assert_eq!(fast.dims(), slow.dims());
    fast.data().iter().zip(slow.data()).map(|(a, b)| (a - b).abs() / (1.0 + b.abs())).fold(0.0, f64::max)
}

/// A random convolution of at most 16x16 frames and 8 channels.
pub fn random_conv(rng: &mut ChaCha8Rng) -> (usize, usize, ConvSpec) {
    let groups = [1, 2, 4, 8][rng.random_range(0..4)];
    let per = 8 / groups;
    let spec = ConvSpec::new(
        [1, 3][rng.random_range(0..2)],
        groups * rng.random_range(1..=per),
        groups * rng.random_range(1..=per),
        rng.random_range(1..=2),
        rng.random_range(1..=2),
        groups,
    )
    .unwrap();
    (rng.random_range(1..=16), rng.random_range(1..=16), spec)
}

/// Threshold sweep by direct counting at every unique score and `+inf`.
pub fn brute_force(scores: &[f64], labels: &[bool], params: &DcfParams) -> (f64, f64) {
    let nt = labels.iter().filter(|&&l| l).count() as f64;
    let nn = labels.len() as f64 - nt;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let sweep: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&th| {
            let miss = scores.iter().zip(labels).filter(|(&s, &l)| l && s < th).count() as f64;
            let fa = scores.iter().zip(labels).filter(|(&s, &l)| !l && s >= th).count() as f64;
            (miss / nt, fa / nn)
        })
        .collect();
    let i = sweep.iter().position(|(fr, fa)| fr - fa >= 0.0).unwrap();
    let (fr, fa) = sweep[i];
    let eer = if fr - fa == 0.0 || i == 0 {
        100.0 * fr
    } else {
        let (pfr, pfa) = sweep[i - 1];
        let (d0, d1) = (pfr - pfa, fr - fa);
        let lambda = -d0 / (d1 - d0);
        100.0 * (pfr + lambda * (fr - pfr))
    };
    let c_default = (params.c_fr * params.p_target).min(params.c_fa * (1.0 - params.p_target));
    let min_dcf = sweep
        .iter()
        .map(|(fr, fa)| params.c_fr * params.p_target * fr + params.c_fa * (1.0 - params.p_target) * fa)
        .fold(f64::INFINITY, f64::min)
        / c_default;
    (eer, min_dcf)
}

/// Up to 2000 trials, sometimes with heavily tied scores.
pub fn random_trials(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=2000);
    let quantize = rng.random_bool(0.3);
    let sep = rng.random_range(0.0..3.0);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = labels
        .iter()
        .map(|&l| {
            let s: f64 = rng.random_range(-1.0..1.0) + if l { sep } else { 0.0 };
            if quantize {
                (s * 8.0).round() / 8.0
            } else {
                s
            }
        })
        .collect();
    (scores, labels)
}

/// Trials with scores on a 0.01 grid, so monotone maps keep ties intact.
pub fn grid_trials(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = labels.iter().map(|&l| (rng.random_range(-400..400) + if l { 150 } else { 0 }) as f64 / 100.0).collect();
    (scores, labels)
}

pub const MONOTONE_MAPS: [(&str, fn(f64) -> f64); 4] = [
    ("affine", |s| 3.0 * s + 7.0),
    ("exp", |s| (s / 2.0).exp()),
    ("cubic", |s| s * s * s + s),
    ("atan", f64::atan),
];

/// Four stage outputs with halving resolution and random values.
pub fn random_stages(rng: &mut ChaCha8Rng, t: usize) -> Vec<Tensor3<f64>> {
    let mut out = Vec::new();
    let (mut t, mut f) = (t, 8);
    for c in [2, 3, 4, 5] {
        out.push(Tensor3::from_fn(t, f, c, |_, _, _| rng.random_range(-2.0..2.0)));
        t = t.div_ceil(2);
        f = f.div_ceil(2);
    }
    out
}

/// Each stage with its frames independently shuffled.
pub fn shuffle_frames(xs: &[Tensor3<f64>], rng: &mut ChaCha8Rng) -> Vec<Tensor3<f64>> {
    xs.iter()
        .map(|x| {
            let mut order: Vec<usize> = (0..x.t()).collect();
            order.shuffle(rng);
            x.permute_time(&order)
        })
        .collect()
}
