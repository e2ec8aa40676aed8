mod common;

use lwi_core::align::{
    align_and_fuse, align_and_fuse_with_report, permute_incoming, permute_outgoing, FusionConfig, FusionWeight,
    HeadFusion, LayerPolicy, Metric,
};
use lwi_core::matching::{MatchConfig, PlanMode, TransportPlan};
use lwi_core::net::Model;
use proptest::prelude::*;

fn hard_max(k: f64) -> FusionConfig {
    FusionConfig {
        k: FusionWeight::Fixed(k),
        policy: LayerPolicy {
            n_deep: 0,
            metric: Metric::Euclidean,
            mode: PlanMode::Hard,
        },
        ..FusionConfig::default()
    }
}

fn exact() -> MatchConfig {
    MatchConfig {
        tau: 1e-4,
        ..MatchConfig::default()
    }
}

#[test]
fn consistent_permutation_preserves_function() {
    let x = common::random_inputs(100, 8, 1);
    for seed in 0..20 {
        let a = common::random_model(seed, 8, &[32, 16], &[3, 2]);
        let mut r = common::rng(seed + 500);
        let layer = (seed % 2) as usize;
        let perm = common::random_perm(a.feature_layers[layer].rows(), &mut r);
        let b = common::permute_hidden(&a, layer, &perm);
        assert!(common::max_output_diff(&a, &b, &x) < 1e-6);
    }
}

#[test]
fn fusing_with_a_permuted_copy_recovers_the_permutation() {
    let x = common::random_inputs(100, 8, 2);
    for seed in 0..20 {
        let a = common::random_model(seed, 8, &[32, 16], &[4]);
        let mut r = common::rng(seed + 900);
        let perm = common::random_perm(32, &mut r);
        let b = common::permute_hidden(&a, 0, &perm);
        for k in [0.0, 0.3, 0.5, 1.0] {
            let (fused, report) = align_and_fuse_with_report(&a, &b, &hard_max(k)).unwrap();
            // Old channel perm[i] sits at new slot i.
            let found = report.layers[0].plan.permutation().unwrap();
            for (slot, &old) in perm.iter().enumerate() {
                assert_eq!(found[old], slot);
            }
            assert!(report.layers[1].plan.is_identity());
            assert!(common::max_output_diff(&a, &fused, &x) < 1e-6, "seed {seed} k {k}");
        }
    }
}

#[test]
fn self_fusion_is_idempotent() {
    for seed in 0..20 {
        let a = common::random_model(seed, 8, &[16, 12], &[2, 3]);
        for k in [0.0, 0.3, 1.0] {
            let fused = align_and_fuse(&a, &a, &hard_max(k)).unwrap();
            assert!(common::max_param_diff(&a, &fused) <= 1e-9);
        }
    }
}

#[test]
fn zero_k_returns_the_new_feature_extractor() {
    let a = common::random_model(1, 5, &[6, 4], &[2]);
    let b = common::random_model(2, 5, &[6, 4], &[2, 2]);
    let cfg = FusionConfig {
        k: FusionWeight::Fixed(0.0),
        ..FusionConfig::default()
    };
    let fused = align_and_fuse(&a, &b, &cfg).unwrap();
    assert_eq!(fused.feature_layers, b.feature_layers);
    assert_eq!(fused.heads, b.heads);
}

#[test]
fn deep_layer_does_not_match_a_model_to_itself() {
    for seed in 0..10 {
        let a = common::random_model(seed, 6, &[8, 8], &[2]);
        for match_cfg in [exact(), MatchConfig::default()] {
            let cfg = FusionConfig {
                policy: LayerPolicy {
                    n_deep: 1,
                    mode: PlanMode::Hard,
                    ..LayerPolicy::default()
                },
                match_cfg,
                ..FusionConfig::default()
            };
            let (_, report) = align_and_fuse_with_report(&a, &a, &cfg).unwrap();
            assert!(report.layers[0].plan.is_identity());
            assert!(report.layers[1].deep);
            assert!(!report.layers[1].plan.is_identity());
        }
    }
}

#[test]
fn newest_head_is_copied_and_old_heads_follow_the_last_plan() {
    let old = common::random_model(3, 4, &[6, 5], &[2, 3]);
    let mut new = common::random_model(4, 4, &[6, 5], &[2, 3]);
    new.add_head(2, &mut common::rng(5));
    for heads in [HeadFusion::Fuse, HeadFusion::Carry] {
        let cfg = FusionConfig {
            k: FusionWeight::Fixed(0.25),
            heads,
            policy: LayerPolicy {
                mode: PlanMode::Hard,
                ..LayerPolicy::default()
            },
            ..FusionConfig::default()
        };
        let (fused, report) = align_and_fuse_with_report(&old, &new, &cfg).unwrap();
        assert_eq!(fused.head_sizes(), vec![2, 3, 2]);
        assert_eq!(fused.heads[2], new.heads[2]);
        let last = &report.layers[1].plan;
        for h in 0..2 {
            let aligned = permute_incoming(&old.heads[h], last).unwrap();
            let expected = match heads {
                HeadFusion::Carry => aligned,
                HeadFusion::Fuse => lwi_core::net::LayerWeights {
                    weight: &aligned.weight * 0.25 + &new.heads[h].weight * 0.75,
                    bias: &aligned.bias * 0.25 + &new.heads[h].bias * 0.75,
                },
            };
            let diff = expected
                .weight
                .iter()
                .zip(fused.heads[h].weight.iter())
                .chain(expected.bias.iter().zip(fused.heads[h].bias.iter()))
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }
}

#[test]
fn equal_weight_schedule_uses_old_head_count() {
    let old = common::random_model(3, 4, &[6], &[2, 2, 2]);
    let mut new = old.clone();
    new.add_head(2, &mut common::rng(1));
    let (_, report) = align_and_fuse_with_report(&old, &new, &FusionConfig::default()).unwrap();
    assert_eq!(report.k, 0.75);
}

#[test]
fn architecture_and_head_mismatches_are_rejected() {
    let a = common::random_model(1, 4, &[6, 5], &[2]);
    let wider = common::random_model(2, 4, &[7, 5], &[2]);
    assert!(align_and_fuse(&a, &wider, &FusionConfig::default()).is_err());
    let fewer_heads = common::random_model(3, 4, &[6, 5], &[]);
    assert!(align_and_fuse(&a, &fewer_heads, &FusionConfig::default()).is_err());
    let other_sizes = common::random_model(4, 4, &[6, 5], &[3, 2]);
    assert!(align_and_fuse(&a, &other_sizes, &FusionConfig::default()).is_err());
}

fn aligned_old_layers(old: &Model, plans: &[TransportPlan]) -> Vec<lwi_core::net::LayerWeights> {
    let mut out = Vec::new();
    for (i, layer) in old.feature_layers.iter().enumerate() {
        let w = if i == 0 {
            layer.clone()
        } else {
            permute_incoming(layer, &plans[i - 1]).unwrap()
        };
        out.push(permute_outgoing(&w, &plans[i]).unwrap());
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hard_fusion_is_convex_and_shape_preserving(
        s1 in 0u64..1000,
        s2 in 0u64..1000,
        k in 0.0..=1.0f64,
        n_deep in 0usize..=2,
    ) {
        let old = common::random_model(s1, 5, &[7, 6], &[2]);
        let mut new = common::random_model(s2 + 5000, 5, &[7, 6], &[2]);
        new.add_head(3, &mut common::rng(s2));
        let cfg = FusionConfig {
            k: FusionWeight::Fixed(k),
            policy: LayerPolicy { n_deep, mode: PlanMode::Hard, ..LayerPolicy::default() },
            ..FusionConfig::default()
        };
        let (fused, report) = align_and_fuse_with_report(&old, &new, &cfg).unwrap();
        prop_assert_eq!(fused.architecture(), new.architecture());
        let plans: Vec<TransportPlan> = report.layers.iter().map(|l| l.plan.clone()).collect();
        let aligned = aligned_old_layers(&old, &plans);
        for ((f, o), n) in fused.feature_layers.iter().zip(&aligned).zip(&new.feature_layers) {
            let triples = f.weight.iter().zip(o.weight.iter()).zip(n.weight.iter())
                .chain(f.bias.iter().zip(o.bias.iter()).zip(n.bias.iter()));
            for ((&fv, &ov), &nv) in triples {
                let (lo, hi) = if ov <= nv { (ov, nv) } else { (nv, ov) };
                prop_assert!(fv >= lo - 1e-12 && fv <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn hard_recovery_for_any_permutation(seed in 0u64..10_000) {
        let a = common::random_model(seed, 6, &[10, 8], &[2]);
        let perm = common::random_perm(8, &mut common::rng(seed ^ 0xabc));
        let b = common::permute_hidden(&a, 1, &perm);
        let fused = align_and_fuse(&a, &b, &hard_max(0.5)).unwrap();
        let x = common::random_inputs(30, 6, seed);
        prop_assert!(common::max_output_diff(&a, &fused, &x) < 1e-6);
    }
}
