use moe_core::experts::init_expert_bank;
use moe_core::gating::{route_top1, routing_probabilities_exact2, softmax_gates};
use moe_core::io::{decode_dataset, encode_dataset};
use moe_core::metrics::dispatch_entropy;
use moe_core::rng::LabRng;
use moe_core::signal::{build_orthonormal_basis, generate_dataset};
use moe_core::{Activation, BasisMode, DataConfig, DispatchMatrix, Interval, SeedStreams, Stream};
use proptest::prelude::*;
use rand::SeedableRng;

fn counts(k: usize, m: usize) -> impl Strategy<Value = Vec<Vec<u64>>> {
    prop::collection::vec(prop::collection::vec(0u64..500, m), k)
        .prop_filter("needs a routed example", |rows| rows.iter().flatten().any(|&c| c > 0))
}

proptest! {
    #[test]
    fn entropy_is_between_zero_and_log_k(rows in (2usize..6, 1usize..9).prop_flat_map(|(k, m)| counts(k, m))) {
        let k = rows.len() as f64;
        let h = dispatch_entropy(&DispatchMatrix::from_rows(&rows).unwrap()).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= k.ln() + 1e-12);
    }

    #[test]
    fn entropy_ignores_expert_order(rows in counts(4, 6), shift in 0usize..6) {
        let rotated: Vec<Vec<u64>> = rows
            .iter()
            .map(|r| (0..r.len()).map(|m| r[(m + shift) % r.len()]).collect())
            .collect();
        let a = dispatch_entropy(&DispatchMatrix::from_rows(&rows).unwrap()).unwrap();
        let b = dispatch_entropy(&DispatchMatrix::from_rows(&rotated).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(h in prop::collection::vec(-50.0f64..50.0, 1..10), c in -100.0f64..100.0) {
        let p = softmax_gates(&h).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let shifted: Vec<f64> = h.iter().map(|v| v + c).collect();
        let q = softmax_gates(&shifted).unwrap();
        prop_assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn routing_ignores_common_shift(
        hr in prop::collection::vec((-3.0f64..3.0, 0.0f64..1.0), 2..9),
        c in -10.0f64..10.0,
    ) {
        let (h, r): (Vec<f64>, Vec<f64>) = hr.into_iter().unzip();
        let shifted: Vec<f64> = h.iter().map(|v| v + c).collect();
        let a = route_top1(&h, &r);
        let b = route_top1(&shifted, &r);
        // Exact ties can be broken differently after rounding.
        prop_assert!(a == b || ((h[a] + r[a]) - (h[b] + r[b])).abs() < 1e-12);
    }

    #[test]
    fn two_expert_probabilities_are_monotone(a in -2.0f64..2.0, b in -2.0f64..2.0, step in 0.0f64..1.0) {
        let p = routing_probabilities_exact2(&[a, b]).unwrap();
        let q = routing_probabilities_exact2(&[a + step, b]).unwrap();
        prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
        prop_assert!(q[0] >= p[0] - 1e-15);
        prop_assert!((q[0] - p[0]).abs() <= 4.0 * step + 1e-15);
    }

    #[test]
    fn dataset_encoding_round_trips(seed in any::<u64>(), n in 1usize..20, patches in 3usize..7, sigma_p in 0.1f64..3.0) {
        let config = DataConfig {
            d: 9,
            patches,
            clusters: 3,
            n,
            alpha: Interval::new(0.5, 2.0).unwrap(),
            beta: Interval::new(1.0, 2.0).unwrap(),
            gamma: Interval::new(0.5, 3.0).unwrap(),
            sigma_p,
            shuffle_patches: true,
        };
        let seeds = SeedStreams::new(seed);
        let basis = build_orthonormal_basis(9, 3, &mut seeds.rng(Stream::Basis), BasisMode::Random).unwrap();
        let ds = generate_dataset(&config, &basis, &seeds, Stream::TrainData).unwrap();
        prop_assert_eq!(decode_dataset(&encode_dataset(&ds)).unwrap(), ds);
    }

    #[test]
    fn expert_output_ignores_patch_order(seed in any::<u64>(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = LabRng::seed_from_u64(seed);
        let bank = init_expert_bank(1, 3, 9, 0.5, Activation::Cubic, &mut rng).unwrap();
        let config = DataConfig {
            d: 9,
            patches: 5,
            clusters: 3,
            n: 1,
            alpha: Interval::new(0.5, 2.0).unwrap(),
            beta: Interval::new(1.0, 2.0).unwrap(),
            gamma: Interval::new(0.5, 3.0).unwrap(),
            sigma_p: 1.0,
            shuffle_patches: false,
        };
        let seeds = SeedStreams::new(seed);
        let basis = build_orthonormal_basis(9, 3, &mut seeds.rng(Stream::Basis), BasisMode::Canonical).unwrap();
        let ds = generate_dataset(&config, &basis, &seeds, Stream::TrainData).unwrap();
        let ex = &ds.examples[0];
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut LabRng::seed_from_u64(perm_seed));
        let a = bank.forward(0, ex).unwrap();
        let b = bank.forward(0, &ex.permuted(&perm)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }
}
