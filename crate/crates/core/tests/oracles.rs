//! Fast paths checked against direct reference implementations.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rsknet::kernels::conv::ConvSpec;
use rsknet::scoring::{compute_eer, compute_min_dcf, DcfParams};

use common::{brute_force, conv_gap, random_trials};

#[derive(Debug, Clone)]
struct ConvCase {
    t: usize,
    f: usize,
    spec: ConvSpec,
    seed: u64,
}

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (prop::sample::select(vec![1usize, 2, 4, 8]), 1usize..=16, 1usize..=16, prop::sample::select(vec![1usize, 3]), 1usize..=2, 1usize..=2, any::<u64>())
        .prop_flat_map(|(groups, t, f, k, stride, dilation, seed)| {
            let per = 8 / groups;
            (1..=per, 1..=per).prop_map(move |(ipg, opg)| ConvCase {
                t,
                f,
                spec: ConvSpec::new(k, groups * ipg, groups * opg, stride, dilation, groups).unwrap(),
                seed,
            })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn conv_matches_nested_loops(c in conv_case()) {
        let gap = conv_gap(c.t, c.f, &c.spec, &mut ChaCha8Rng::seed_from_u64(c.seed));
        prop_assert!(gap <= 1e-12, "gap {}", gap);
    }
}

#[test]
fn conv_largest_instance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (groups, stride, dilation) in [(1, 1, 1), (1, 2, 1), (1, 1, 2), (2, 1, 1), (8, 1, 1)] {
        let spec = ConvSpec::new(3, 8, 8, stride, dilation, groups).unwrap();
        assert!(conv_gap(16, 16, &spec, &mut rng) <= 1e-12);
    }
}

#[test]
fn metrics_match_threshold_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let params = [DcfParams::default(), DcfParams { c_fr: 10.0, c_fa: 1.0, p_target: 0.05 }];
    for case in 0..120 {
        let (scores, labels) = random_trials(&mut rng);
        let p = &params[case % 2];
        let (eer, dcf) = brute_force(&scores, &labels, p);
        assert_eq!(compute_eer(&scores, &labels).unwrap(), eer, "case {case}");
        assert_eq!(compute_min_dcf(&scores, &labels, p).unwrap(), dcf, "case {case}");
    }
}
