//! Randomized properties of the exact reductions, weight-space operations,
//! McNemar test, sharding and cost model.

use std::collections::BTreeSet;

use lofi_core::costmodel::{simulate_iteration, CostProfile, LayerCost, SyncMode};
use lofi_core::data::{epoch_stream, shard_stream};
use lofi_core::exact::exact_mean;
use lofi_core::nn::ParamVector;
use lofi_core::stats::{mcnemar_exact, PairedOutcome};
use lofi_core::weights::{interpolate, uniform_average};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, -1e-3..1e-3f64, Just(0.0)]
}

proptest! {
    #[test]
    fn exact_mean_ignores_order(rows in prop::collection::vec(prop::collection::vec(finite(), 5), 1..8), rot in 0usize..8) {
        let slices: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let mut rotated = slices.clone();
        rotated.rotate_left(rot % slices.len());
        prop_assert_eq!(exact_mean(&slices).unwrap(), exact_mean(&rotated).unwrap());
    }

    #[test]
    fn average_of_copies_is_identity(values in prop::collection::vec(finite(), 1..20), n in 1usize..9) {
        let p = ParamVector::from_values(values);
        let copies = vec![p.clone(); n];
        prop_assert_eq!(uniform_average(&copies).unwrap(), p);
    }

    #[test]
    fn exact_mean_is_within_bounds(rows in prop::collection::vec(prop::collection::vec(finite(), 3), 1..8)) {
        let slices: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let mean = exact_mean(&slices).unwrap();
        for (j, m) in mean.iter().enumerate() {
            let lo = rows.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= *m && *m <= hi);
        }
    }

    #[test]
    fn interpolation_endpoints_are_exact(pairs in prop::collection::vec((finite(), finite()), 1..20)) {
        let a = ParamVector::from_values(pairs.iter().map(|p| p.0).collect());
        let b = ParamVector::from_values(pairs.iter().map(|p| p.1).collect());
        prop_assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a.clone());
        prop_assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
    }

    #[test]
    fn mcnemar_is_a_symmetric_probability(n01 in 0u64..300, n10 in 0u64..300, n00 in 0u64..50, n11 in 0u64..50) {
        let p = mcnemar_exact(&PairedOutcome { n01, n10, n00, n11 }).p_value;
        let q = mcnemar_exact(&PairedOutcome { n01: n10, n10: n01, n00, n11 }).p_value;
        prop_assert!(p > 0.0 && p <= 1.0);
        prop_assert_eq!(p, q);
        if n01 == n10 {
            prop_assert_eq!(p, 1.0);
        }
    }

    #[test]
    fn shards_partition_the_usable_stream(len in 1usize..200, world in 1usize..6, batch in 1usize..6, seed: u64) {
        prop_assume!(batch * world <= len);
        let stream = epoch_stream(len, len, 0, seed);
        let mut seen = BTreeSet::new();
        for rank in 0..world {
            for b in shard_stream(&stream, rank, world, batch).unwrap() {
                prop_assert_eq!(b.len(), batch);
                for id in b {
                    prop_assert!(seen.insert(id));
                }
            }
        }
        prop_assert_eq!(seen.len(), len / (batch * world) * batch * world);
    }

    #[test]
    fn overlap_never_slower(
        layers in prop::collection::vec((0.0..0.02f64, 0u64..50_000_000), 1..30),
        forward in 0.0..0.1f64,
        bandwidth in 1e8..1e11f64,
        latency in 0.0..1e-3f64,
        bucket in prop::option::of(1u64..100_000_000),
    ) {
        let profile = CostProfile {
            id: "p".into(),
            layers: layers
                .into_iter()
                .map(|(t, b)| LayerCost { backward_compute_time: t, gradient_bytes: b })
                .collect(),
            forward_time: forward,
            bandwidth,
            latency_per_message: latency,
            bucket_bytes: bucket,
        };
        let overlap = simulate_iteration(&profile, true, SyncMode::CrossNode);
        let serial = simulate_iteration(&profile, false, SyncMode::CrossNode);
        let compute = simulate_iteration(&profile, true, SyncMode::None);
        prop_assert!(overlap <= serial);
        prop_assert!(compute <= overlap);
    }
}
