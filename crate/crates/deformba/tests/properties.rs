//! Randomized invariants on top of the hand-computed unit oracles.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use deformba::casf::{flatten_states, predict_offsets_weights, rearrange_states, OffsetNet};
use deformba::scan::{scan_chunked, scan_parallel, scan_sequential, ScanInputs};
use deformba::tensor::{LinearLayer, Tape};
use deformba::Tensor;

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn scan_algorithms_agree_on_random_shapes(
        seed in 0u64..1_000_000,
        b in 1usize..4,
        c in 1usize..8,
        n in 1usize..4,
        l in 1usize..96,
        q in 1usize..16,
    ) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let v = Tensor::rand_uniform(&[b, c, l], -1.0, 1.0, &mut rng);
        let k = Tensor::rand_uniform(&[b, n, l], -1.0, 1.0, &mut rng);
        let a = Tensor::rand_uniform(&[b, c, n, l], -1.0, 1.0, &mut rng);
        let inputs = ScanInputs::new(v, k, a).unwrap();
        let seq = scan_sequential(&inputs).unwrap().s;
        prop_assert!(seq.max_abs_diff(&scan_parallel(&inputs).unwrap().s) <= 1e-10);
        prop_assert!(seq.max_abs_diff(&scan_chunked(&inputs, q).unwrap().s) <= 1e-10);
    }

    #[test]
    fn fusion_weights_stay_on_the_simplex(
        seed in 0u64..1_000_000,
        g in 2usize..5,
        h in 1usize..5,
        w in 1usize..5,
    ) {
        let c = 8;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut net = OffsetNet::init(c, g, &mut rng);
        net.head_weights = LinearLayer::init(g, c, true, &mut rng);
        let s2d = Tensor::rand_uniform(&[2, c, h, w], -2.0, 2.0, &mut rng);
        let tape = Tape::new();
        let (_, wts) = predict_offsets_weights(&tape.constant(s2d), &net.lift(&tape)).unwrap();
        let wts = wts.value();
        for b in 0..2 {
            for i in 0..h {
                for j in 0..w {
                    let mut sum = 0.0;
                    for gi in 0..g {
                        let v = wts.at(&[b, i, j, gi]);
                        prop_assert!(v >= 0.0);
                        sum += v;
                    }
                    prop_assert!((sum - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn bilinear_sampling_is_linear_in_the_map(
        seed in 0u64..1_000_000,
        ca in -2.0f64..2.0,
        cb in -2.0f64..2.0,
        m in 1usize..9,
    ) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let s1 = Tensor::rand_uniform(&[1, 3, 5, 5], -1.0, 1.0, &mut rng);
        let s2 = Tensor::rand_uniform(&[1, 3, 5, 5], -1.0, 1.0, &mut rng);
        // Positions include out-of-bounds probes; zero padding is linear too.
        let pos = Tensor::rand_uniform(&[1, m, 2], -2.0, 7.0, &mut rng);
        let mixed = Tensor::from_fn(s1.shape(), |i| ca * s1.at(i) + cb * s2.at(i));
        let tape = Tape::new();
        let at = |map: &Tensor| {
            tape.constant(map.clone())
                .bilinear_sample(&tape.constant(pos.clone()))
                .unwrap()
                .value()
        };
        let (lhs, r1, r2) = (at(&mixed), at(&s1), at(&s2));
        let rhs = Tensor::from_fn(lhs.shape(), |i| ca * r1.at(i) + cb * r2.at(i));
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn state_grid_rearrangement_round_trips(
        seed in 0u64..1_000_000,
        b in 1usize..3,
        c in 1usize..5,
        n in 1usize..4,
        h in 1usize..5,
        w in 1usize..5,
    ) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let s = Tensor::rand_uniform(&[b, c, n, h * w], -1.0, 1.0, &mut rng);
        let s2d = rearrange_states(&s, h, w).unwrap();
        prop_assert_eq!(s2d.shape(), &[b, c * n, h, w]);
        let back = flatten_states(&s2d, n).unwrap();
        prop_assert_eq!(back.shape(), s.shape());
        prop_assert!(back.max_abs_diff(&s) == 0.0);
    }
}
