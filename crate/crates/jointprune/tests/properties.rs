//! Property tests for the spec-level invariants: the vector/config mapping,
//! clamping, the constraint penalty, schedules, and estimator linearity.

use proptest::prelude::*;

use jointprune::cost::ConstraintSpec;
use jointprune::estimator::{estimate_gradient, sample_noises, EvaluatedSample, Schedule};
use jointprune::presets::desk_space;
use jointprune::space::{
    clamp, normalize, round_to_config, ArchitectureConfig, ArchitectureSpace, LayerKind,
    LayerSpec, PruningVector,
};

fn untied_space() -> ArchitectureSpace {
    ArchitectureSpace {
        layers: vec![
            LayerSpec {
                kind: LayerKind::Conv,
                kernel: 3,
                stride: 1,
                max_in_channels: 1,
                max_out_channels: 13,
                min_out_channels: 2,
                has_relu: true,
                block_id: 0,
            },
            LayerSpec {
                kind: LayerKind::Conv,
                kernel: 3,
                stride: 1,
                max_in_channels: 13,
                max_out_channels: 9,
                min_out_channels: 1,
                has_relu: true,
                block_id: 1,
            },
        ],
        tie_groups: vec![],
        droppable_blocks: vec![1],
        min_depth: 0,
        spatial_max: 11,
        spatial_min: 3,
        input_channels: 1,
    }
}

proptest! {
    // normalize o round_to_config is the identity on concrete architectures.
    #[test]
    fn round_trip_untied(c0 in 2usize..=13, c1 in 1usize..=9, s in 3usize..=11, d in 0usize..=1) {
        let space = untied_space();
        let config = ArchitectureConfig { out_channels: vec![c0, c1], spatial: s, depth: d };
        let v = normalize(&config, &space).unwrap();
        prop_assert_eq!(round_to_config(&v, &space).unwrap(), config);
    }

    // Same for the tied, strided desk space (channels equal, spatial even).
    #[test]
    fn round_trip_desk(c in 3usize..=24, s in 2usize..=8, d in 1usize..=3) {
        let space = desk_space();
        let config = ArchitectureConfig {
            out_channels: vec![c, c, c, c, 4],
            spatial: 2 * s,
            depth: d,
        };
        let v = normalize(&config, &space).unwrap();
        prop_assert_eq!(round_to_config(&v, &space).unwrap(), config);
    }

    // clamp is idempotent, stays inside the box, and ties stay equalized.
    #[test]
    fn clamp_idempotent_and_bounded(entries in prop::collection::vec(-1.0f64..2.0, 7)) {
        let space = desk_space();
        let c = clamp(&PruningVector::new(entries), &space);
        let lb = space.lower_bounds();
        for (x, b) in c.entries.iter().zip(&lb) {
            prop_assert!(*x >= *b && *x <= 1.0);
        }
        prop_assert_eq!(clamp(&c, &space), c.clone());
        for group in &space.tie_groups {
            for &i in group {
                prop_assert_eq!(c.entries[i], c.entries[group[0]]);
            }
        }
    }

    // Any clamped vector rounds to a config the space accepts.
    #[test]
    fn rounding_always_valid(entries in prop::collection::vec(-1.0f64..2.0, 7)) {
        let space = desk_space();
        let config = round_to_config(&clamp(&PruningVector::new(entries), &space), &space).unwrap();
        prop_assert!(space.validate_config(&config).is_ok());
    }

    // The penalty is nonnegative, zero exactly at the target, and symmetric.
    #[test]
    fn penalty_shape(target in 1.0f64..1e9, delta in 0.0f64..1e8, rho in 1e-9f64..10.0) {
        let c = ConstraintSpec::flops(target, rho, 1e-6);
        prop_assert_eq!(c.penalty(target), 0.0);
        let above = c.penalty(target + delta);
        let below = c.penalty(target - delta);
        prop_assert!(above >= 0.0);
        prop_assert!((above - below).abs() <= 1e-9 * above.abs().max(1.0));
    }

    // Schedule values stay within the endpoint interval.
    #[test]
    fn schedule_bounded(initial in 0.001f64..1.0, final_value in 0.001f64..1.0, step in 0usize..=50) {
        let s = Schedule::new(initial, final_value, 50).unwrap();
        let v = s.value(step).unwrap();
        let (lo, hi) = (initial.min(final_value), initial.max(final_value));
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }

    // The estimate is linear in the errors: scaling all errors scales the
    // gradient by the same factor (baseline subtracts the scaled mean).
    #[test]
    fn estimator_linear_in_errors(seed in 0u64..1000, scale in 0.25f64..4.0) {
        let noises = sample_noises(4, 0.2, 16, seed).unwrap();
        let mk = |s: f64| -> Vec<EvaluatedSample> {
            noises
                .iter()
                .enumerate()
                .map(|(i, n)| EvaluatedSample {
                    noise: n.clone(),
                    error: s * (i as f64 - 8.0),
                    cost: 0.0,
                    loss: 0.0,
                })
                .collect()
        };
        let g1 = estimate_gradient(&mk(1.0), 0.2, true).unwrap();
        let g2 = estimate_gradient(&mk(scale), 0.2, true).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            prop_assert!((scale * a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }
}
