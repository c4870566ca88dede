mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rsknet::head::AmSoftmax;
use rsknet::pooling::{pool, PoolKind};
use rsknet::scoring::{compute_eer, compute_min_dcf, det_points, DcfParams};
use rsknet::sk::attention_weights;

use common::{grid_trials, random_stages, shuffle_frames, MONOTONE_MAPS};

proptest! {
    #[test]
    fn attention_is_convex(pairs in prop::collection::vec((-700.0f64..700.0, -700.0f64..700.0), 1..64)) {
        let (alpha, beta): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (a, b) = attention_weights(&alpha, &beta);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x + y - 1.0).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(x) && (0.0..=1.0).contains(y));
        }
    }

    #[test]
    fn am_softmax_ignores_embedding_scale(seed in any::<u64>(), k in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let am = AmSoftmax::<f64>::new(6, 5, 30.0, 0.2, &mut rng).unwrap();
        let emb: Vec<f64> = (0..3 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = emb.iter().map(|v| v * k).collect();
        let labels = [0, 4, 2];
        let (l1, l2) = (am.loss(&emb, &labels).unwrap(), am.loss(&scaled, &labels).unwrap());
        prop_assert!((l1 - l2).abs() <= 1e-6 * l1.abs().max(1.0));
    }
}

#[test]
fn pooling_ignores_frame_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let t = rng.random_range(2..40);
        let xs = random_stages(&mut rng, t);
        let shuffled = shuffle_frames(&xs, &mut rng);
        for kind in [PoolKind::Mtsp, PoolKind::Sp, PoolKind::Gap] {
            let a = pool(kind, &xs).unwrap();
            let b = pool(kind, &shuffled).unwrap();
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()), "{kind}: {u} vs {v}");
            }
        }
    }
}

#[test]
fn metrics_invariant_under_monotone_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = DcfParams::default();
    for _ in 0..30 {
        let n = rng.random_range(2..600);
        let (scores, labels) = grid_trials(&mut rng, n);
        let eer = compute_eer(&scores, &labels).unwrap();
        let dcf = compute_min_dcf(&scores, &labels, &params).unwrap();
        for (name, g) in MONOTONE_MAPS {
            let mapped: Vec<f64> = scores.iter().map(|&s| g(s)).collect();
            assert_eq!(compute_eer(&mapped, &labels).unwrap(), eer, "{name}");
            assert_eq!(compute_min_dcf(&mapped, &labels, &params).unwrap(), dcf, "{name}");
        }
    }
}

#[test]
fn det_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..30 {
        let n = rng.random_range(2..800);
        let (scores, labels) = grid_trials(&mut rng, n);
        let det = det_points(&scores, &labels).unwrap();
        for w in det.windows(2) {
            assert!(w[0].threshold < w[1].threshold);
            assert!(w[1].p_fa <= w[0].p_fa && w[1].p_fr >= w[0].p_fr);
        }
        let dcf = compute_min_dcf(&scores, &labels, &DcfParams::default()).unwrap();
        assert!((0.0..=1.0).contains(&dcf));
    }
}
